use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::Result;
use crate::ndiff::Tensor;
use crate::sigproc::{MelConfig, MelSpectrogram, Waveform};

pub(crate) fn hann(len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()) as f32)
        .collect()
}

pub(crate) fn fft_size_for(frame_len: usize) -> usize {
    frame_len.next_power_of_two()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank, HTK mel spacing, `[bands, fft_bins]` where
/// `fft_bins = fft_size/2 + 1`.
pub(crate) fn mel_filterbank(cfg: &MelConfig, rate: u32, fft_size: usize) -> Vec<Vec<f32>> {
    let nyquist = rate as f64 / 2.0;
    let fmax = cfg.fmax.unwrap_or(nyquist).min(nyquist);
    let bins = fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    let points: Vec<f64> = (0..cfg.bands + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.bands + 1) as f64))
        .collect();
    let bin_hz = rate as f64 / fft_size as f64;
    let mut bank = vec![vec![0.0f32; bins]; cfg.bands];
    for b in 0..cfg.bands {
        let (lo, center, hi) = (points[b], points[b + 1], points[b + 2]);
        for (k, w) in bank[b].iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let v = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            *w = v as f32;
        }
    }
    bank
}

/// Per-frame magnitude spectra, `[N, fft_size/2 + 1]`.
pub(crate) fn stft_magnitudes(
    w: &Waveform,
    cfg: &MelConfig,
) -> Result<(Tensor<f32>, usize)> {
    let rate = w.sample_rate;
    let flen = cfg.frame_len_samples(rate);
    let shift = cfg.shift_samples(rate);
    let n = cfg.num_frames(w.samples.len(), rate)?;
    let fft_size = fft_size_for(flen);
    let bins = fft_size / 2 + 1;
    let window = hann(flen);
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut mags = Tensor::zeros(&[n, bins]);
    let mut buf = vec![Complex::new(0.0f32, 0.0); fft_size];
    for t in 0..n {
        let start = t * shift;
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        for i in 0..flen {
            buf[i] = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let row = mags.row_mut(t);
        for (k, r) in row.iter_mut().enumerate() {
            *r = buf[k].norm();
        }
    }
    Ok((mags, fft_size))
}

/// Windowed short-time transform, mel filterbank, then natural log with
/// the configured floor.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let (mags, fft_size) = stft_magnitudes(w, cfg)?;
    let bank = mel_filterbank(cfg, w.sample_rate, fft_size);
    let n = mags.rows();
    let mut frames = Tensor::zeros(&[n, cfg.bands]);
    let floor = cfg.log_floor as f32;
    for t in 0..n {
        let spec = mags.row(t);
        let out = frames.row_mut(t);
        for (b, filt) in bank.iter().enumerate() {
            let mut acc = 0.0f32;
            for (w, &s) in filt.iter().zip(spec) {
                acc += w * s;
            }
            out[b] = acc.max(floor).ln();
        }
    }
    Ok(MelSpectrogram {
        frames,
        frame_shift: cfg.frame_shift,
        frame_length: cfg.frame_length,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_law_examples() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.num_frames(24000, 24000).unwrap(), 77);
        assert_eq!(cfg.num_frames(1200, 24000).unwrap(), 1);
        assert!(cfg.num_frames(1199, 24000).is_err());
        assert_eq!(cfg.num_frames(1500, 24000).unwrap(), 2);
    }

    #[test]
    fn one_second_at_24k_gives_77_by_80() {
        let w = Waveform::new(vec![0.01; 24000], 24000).unwrap();
        let m = mel_spectrogram(&w, &MelConfig::default()).unwrap();
        assert_eq!(m.frames.shape(), &[77, 80]);
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let w = Waveform::new(vec![0.0; 4800], 24000).unwrap();
        let m = mel_spectrogram(&w, &MelConfig::default()).unwrap();
        let floor = (1e-5f32).ln();
        for &v in m.frames.data() {
            assert_eq!(v, floor);
        }
    }

    #[test]
    fn values_never_below_floor() {
        let w = Waveform::new(
            (0..24000).map(|i| ((i as f32) * 0.7).sin() * 0.3).collect(),
            24000,
        )
        .unwrap();
        let m = mel_spectrogram(&w, &MelConfig::default()).unwrap();
        let floor = (1e-5f32).ln();
        for &v in m.frames.data() {
            assert!(v >= floor - 1e-6);
        }
    }

    #[test]
    fn pure_tone_concentrates_in_one_band() {
        let rate = 24000u32;
        let freq = 440.0f64;
        let samples: Vec<f32> = (0..rate)
            .map(|i| {
                (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32 * 0.5
            })
            .collect();
        let w = Waveform::new(samples, rate).unwrap();
        let m = mel_spectrogram(&w, &MelConfig::default()).unwrap();
        let argmax = |row: &[f32]| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let first = argmax(m.frames.row(0));
        for t in 0..m.num_frames() {
            assert_eq!(argmax(m.frames.row(t)), first, "frame {t}");
        }
        // 440 Hz must fall inside the winning triangle
        let cfg = MelConfig::default();
        let fft_size = fft_size_for(cfg.frame_len_samples(rate));
        let bank = mel_filterbank(&cfg, rate, fft_size);
        let bin = (freq * fft_size as f64 / rate as f64).round() as usize;
        assert!(bank[first][bin] > 0.0);
    }

    #[test]
    fn filterbank_rows_cover_spectrum() {
        let cfg = MelConfig::default();
        let bank = mel_filterbank(&cfg, 24000, 2048);
        assert_eq!(bank.len(), 80);
        for (b, row) in bank.iter().enumerate() {
            assert!(row.iter().any(|&v| v > 0.0), "band {b} empty");
        }
    }
}
