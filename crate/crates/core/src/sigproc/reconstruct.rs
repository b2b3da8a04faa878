use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::sigproc::mel::{fft_size_for, hann, mel_filterbank};
use crate::sigproc::{MelConfig, MelSpectrogram, Waveform};

/// Iterative phase reconstruction from a pseudo-inverted mel filterbank.
/// Listening utility only; the contract is spectral-envelope similarity,
/// not exactness. Deterministic: the phase starts at zero.
pub fn reconstruct(
    m: &MelSpectrogram,
    cfg: &MelConfig,
    rate: u32,
    iterations: usize,
) -> Result<Waveform> {
    if iterations == 0 {
        return Err(Error::InvalidArg("iterations must be >= 1".into()));
    }
    if m.bands() != cfg.bands {
        return Err(Error::shape("reconstruct", cfg.bands, m.bands()));
    }
    let flen = cfg.frame_len_samples(rate);
    let shift = cfg.shift_samples(rate);
    let fft_size = fft_size_for(flen);
    let bins = fft_size / 2 + 1;
    let bank = mel_filterbank(cfg, rate, fft_size);
    let n = m.num_frames();

    // Mel -> linear magnitude via weighted transpose.
    let mut col_sum = vec![0.0f32; bins];
    for row in &bank {
        for (k, &w) in row.iter().enumerate() {
            col_sum[k] += w;
        }
    }
    let mut target = vec![vec![0.0f32; bins]; n];
    for t in 0..n {
        let amps: Vec<f32> = m.frames.row(t).iter().map(|&v| v.exp()).collect();
        for k in 0..bins {
            let mut acc = 0.0f32;
            for (b, row) in bank.iter().enumerate() {
                acc += row[k] * amps[b];
            }
            target[t][k] = acc / col_sum[k].max(1e-8);
        }
    }

    let window = hann(flen);
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let ifft = planner.plan_fft_inverse(fft_size);
    let out_len = (n - 1) * shift + flen;
    let mut phases = vec![vec![0.0f32; bins]; n];
    let mut samples = vec![0.0f32; out_len];
    for _ in 0..iterations {
        samples = overlap_add(&target, &phases, &window, flen, shift, fft_size, &*ifft);
        // re-analyze to update phases
        let mut buf = vec![Complex::new(0.0f32, 0.0); fft_size];
        for t in 0..n {
            let start = t * shift;
            for v in buf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            for i in 0..flen {
                buf[i] = Complex::new(samples[start + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            for k in 0..bins {
                phases[t][k] = buf[k].arg();
            }
        }
    }
    let peak = samples.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    if peak > 1.0 {
        let s = 1.0 / peak;
        for v in &mut samples {
            *v *= s;
        }
    }
    Waveform::new(samples, rate)
}

fn overlap_add(
    target: &[Vec<f32>],
    phases: &[Vec<f32>],
    window: &[f32],
    flen: usize,
    shift: usize,
    fft_size: usize,
    ifft: &dyn rustfft::Fft<f32>,
) -> Vec<f32> {
    let n = target.len();
    let bins = fft_size / 2 + 1;
    let out_len = (n - 1) * shift + flen;
    let mut acc = vec![0.0f32; out_len];
    let mut norm = vec![0.0f32; out_len];
    let mut buf = vec![Complex::new(0.0f32, 0.0); fft_size];
    let scale = 1.0 / fft_size as f32;
    for t in 0..n {
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        for k in 0..bins {
            let c = Complex::from_polar(target[t][k], phases[t][k]);
            buf[k] = c;
            if k > 0 && k < fft_size - k {
                buf[fft_size - k] = c.conj();
            }
        }
        ifft.process(&mut buf);
        let start = t * shift;
        for i in 0..flen {
            acc[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    // Clamp the normalizer relative to its peak so barely-windowed
    // boundary samples are attenuated instead of amplified.
    let max_norm = norm.iter().fold(0.0f32, |a, &v| a.max(v));
    let floor = (max_norm * 1e-2).max(1e-8);
    for (a, &w) in acc.iter_mut().zip(&norm) {
        *a /= w.max(floor);
    }
    acc
}

/// Frobenius distance between the magnitude spectrogram of `samples` and
/// the target magnitudes; used by the monotonicity test.
pub fn projection_error(m: &MelSpectrogram, cfg: &MelConfig, rate: u32, w: &Waveform) -> Result<f64> {
    let flen = cfg.frame_len_samples(rate);
    let fft_size = fft_size_for(flen);
    let bins = fft_size / 2 + 1;
    let bank = mel_filterbank(cfg, rate, fft_size);
    let mut col_sum = vec![0.0f32; bins];
    for row in &bank {
        for (k, &v) in row.iter().enumerate() {
            col_sum[k] += v;
        }
    }
    let (mags, _) = crate::sigproc::mel::stft_magnitudes(w, cfg)?;
    let n = m.num_frames().min(mags.rows());
    let mut err = 0.0f64;
    for t in 0..n {
        let amps: Vec<f32> = m.frames.row(t).iter().map(|&v| v.exp()).collect();
        let got = mags.row(t);
        for k in 0..bins {
            let mut want = 0.0f32;
            for (b, row) in bank.iter().enumerate() {
                want += row[k] * amps[b];
            }
            want /= col_sum[k].max(1e-8);
            let d = (want - got[k]) as f64;
            err += d * d;
        }
    }
    Ok(err.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::Tensor;

    fn silence_mel(n: usize, bands: usize) -> MelSpectrogram {
        let floor = (1e-5f32).ln();
        let mut frames = Tensor::zeros(&[n, bands]);
        frames.fill(floor);
        MelSpectrogram {
            frames,
            frame_shift: 0.0125,
            frame_length: 0.05,
        }
    }

    #[test]
    fn silence_reconstructs_near_silent() {
        let cfg = MelConfig::default();
        let m = silence_mel(20, 80);
        let w = reconstruct(&m, &cfg, 24000, 4).unwrap();
        let peak = w.samples.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
        assert!(peak < 1e-3, "peak {peak}");
    }

    #[test]
    fn more_iterations_do_not_hurt() {
        let cfg = MelConfig::default();
        // a tone's mel as a realistic target
        let rate = 24000u32;
        let samples: Vec<f32> = (0..rate)
            .map(|i| {
                let t = i as f64 / rate as f64;
                ((2.0 * std::f64::consts::PI * 220.0 * t).sin()
                    + 0.5 * (2.0 * std::f64::consts::PI * 440.0 * t).sin()) as f32
                    * 0.3
            })
            .collect();
        let w = Waveform::new(samples, rate).unwrap();
        let m = crate::sigproc::mel_spectrogram(&w, &cfg).unwrap();
        let w1 = reconstruct(&m, &cfg, rate, 1).unwrap();
        let w32 = reconstruct(&m, &cfg, rate, 32).unwrap();
        let e1 = projection_error(&m, &cfg, rate, &w1).unwrap();
        let e32 = projection_error(&m, &cfg, rate, &w32).unwrap();
        assert!(e32 <= e1 + 1e-6, "e1={e1} e32={e32}");
    }

    #[test]
    fn output_length_matches_framing() {
        let cfg = MelConfig::default();
        let m = silence_mel(10, 80);
        let w = reconstruct(&m, &cfg, 24000, 1).unwrap();
        assert_eq!(w.samples.len(), 9 * 300 + 1200);
        assert_eq!(cfg.num_frames(w.samples.len(), 24000).unwrap(), 10);
    }
}
