use crate::error::{Error, Result};
use crate::sigproc::{F0Track, MelConfig, Waveform};

/// Normalized-autocorrelation pitch tracker settings.
#[derive(Debug, Clone)]
pub struct F0Config {
    pub f_min: f64,
    pub f_max: f64,
    /// A frame is voiced when its best normalized autocorrelation
    /// reaches this.
    pub voicing_threshold: f64,
    /// Mean-square energy below which a frame is silent.
    pub energy_floor: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        F0Config {
            f_min: 60.0,
            f_max: 400.0,
            voicing_threshold: 0.5,
            energy_floor: 1e-6,
        }
    }
}

/// Estimates F0 on the same frame grid as [`super::mel_spectrogram`].
/// Unvoiced frames get 0 Hz. Among candidate lags scoring at least 90%
/// of the best, the shortest wins, which suppresses octave-down errors
/// on strongly periodic input; the winning lag is refined by parabolic
/// interpolation.
pub fn estimate_f0(w: &Waveform, mel_cfg: &MelConfig, cfg: &F0Config) -> Result<F0Track> {
    let rate = w.sample_rate as f64;
    if cfg.f_min >= cfg.f_max || cfg.f_max > rate / 2.0 || cfg.f_min <= 0.0 {
        return Err(Error::Config(format!(
            "f0 range [{}, {}] invalid for rate {rate}",
            cfg.f_min, cfg.f_max
        )));
    }
    let flen = mel_cfg.frame_len_samples(w.sample_rate);
    let shift = mel_cfg.shift_samples(w.sample_rate);
    let n = mel_cfg.num_frames(w.samples.len(), w.sample_rate)?;
    let lag_min = (rate / cfg.f_max).floor().max(2.0) as usize;
    let lag_max = ((rate / cfg.f_min).ceil() as usize).min(flen - 2);
    let mut values = vec![0.0f32; n];
    let mut voiced = vec![false; n];
    let mut frame = vec![0.0f64; flen];
    for t in 0..n {
        let start = t * shift;
        let mut mean = 0.0f64;
        for i in 0..flen {
            frame[i] = w.samples[start + i] as f64;
            mean += frame[i];
        }
        mean /= flen as f64;
        let mut energy = 0.0f64;
        for v in frame.iter_mut() {
            *v -= mean;
            energy += *v * *v;
        }
        energy /= flen as f64;
        if energy < cfg.energy_floor {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        let mut scores = vec![f64::NEG_INFINITY; lag_max + 2];
        for lag in lag_min..=lag_max {
            let m = flen - lag;
            let mut num = 0.0f64;
            let mut e0 = 0.0f64;
            let mut e1 = 0.0f64;
            for i in 0..m {
                num += frame[i] * frame[i + lag];
                e0 += frame[i] * frame[i];
                e1 += frame[i + lag] * frame[i + lag];
            }
            let denom = (e0 * e1).sqrt();
            let r = if denom > 0.0 { num / denom } else { 0.0 };
            scores[lag] = r;
            if r > best {
                best = r;
            }
        }
        if best < cfg.voicing_threshold {
            continue;
        }
        let mut lag_pick = lag_min;
        for lag in lag_min..=lag_max {
            if scores[lag] >= 0.9 * best {
                lag_pick = lag;
                break;
            }
        }
        let mut refined = lag_pick as f64;
        if lag_pick > lag_min && lag_pick < lag_max {
            let (a, b, c) = (scores[lag_pick - 1], scores[lag_pick], scores[lag_pick + 1]);
            let denom = a - 2.0 * b + c;
            if denom.abs() > 1e-12 {
                let delta = 0.5 * (a - c) / denom;
                if delta.abs() <= 1.0 {
                    refined += delta;
                }
            }
        }
        let f0 = rate / refined;
        if f0 >= cfg.f_min && f0 <= cfg.f_max {
            values[t] = f0 as f32;
            voiced[t] = true;
        }
    }
    Ok(F0Track { values, voiced })
}
