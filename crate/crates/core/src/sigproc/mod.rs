//! Audio ingestion and feature extraction: WAV parsing, mel
//! spectrograms, mel-cepstra, F0 tracking, and iterative phase
//! reconstruction for listening checks.
//!
//! Conventions, fixed so golden values stay stable: natural log with
//! floor 1e-5 on mel amplitudes; triangular HTK-spaced filterbank from
//! 0 Hz to Nyquist by default; frames fully inside the signal, so
//! `N = 1 + floor((samples - frame_len) / shift)`.

pub mod f0;
pub mod mcc;
pub mod mel;
pub mod reconstruct;
pub mod wav;

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

pub use f0::{estimate_f0, F0Config};
pub use mcc::mel_to_mcc;
pub use mel::mel_spectrogram;
pub use reconstruct::reconstruct;
pub use wav::{load_wav, save_wav};

pub const SUPPORTED_RATES: [u32; 3] = [16000, 22050, 24000];

/// Mono audio in [-1, 1] at one of the supported sample rates.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(Error::InvalidArg(format!(
                "sample rate {sample_rate} not in {SUPPORTED_RATES:?}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArg("empty waveform".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Analysis settings shared by the mel, F0, and reconstruction paths.
#[derive(Debug, Clone)]
pub struct MelConfig {
    pub bands: usize,
    /// Seconds between frame starts.
    pub frame_shift: f64,
    /// Seconds per analysis window.
    pub frame_length: f64,
    /// Filterbank range; `fmax = None` means Nyquist.
    pub fmin: f64,
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            bands: 80,
            frame_shift: 0.0125,
            frame_length: 0.050,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn frame_len_samples(&self, rate: u32) -> usize {
        (rate as f64 * self.frame_length).round() as usize
    }

    pub fn shift_samples(&self, rate: u32) -> usize {
        (rate as f64 * self.frame_shift).round() as usize
    }

    /// The framing law. Errors when the signal is shorter than a frame.
    pub fn num_frames(&self, num_samples: usize, rate: u32) -> Result<usize> {
        let flen = self.frame_len_samples(rate);
        let shift = self.shift_samples(rate);
        if shift == 0 || shift > flen {
            return Err(Error::Config(format!(
                "frame shift {shift} must be in 1..={flen} samples"
            )));
        }
        if num_samples < flen {
            return Err(Error::InvalidArg(format!(
                "waveform of {num_samples} samples shorter than one {flen}-sample frame"
            )));
        }
        Ok(1 + (num_samples - flen) / shift)
    }
}

/// Log-amplitude mel frames, `[N, bands]`.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub frames: Tensor<f32>,
    pub frame_shift: f64,
    pub frame_length: f64,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn bands(&self) -> usize {
        self.frames.cols()
    }
}

/// Per-frame fundamental frequency; `values[i] > 0` iff `voiced[i]`.
#[derive(Debug, Clone)]
pub struct F0Track {
    pub values: Vec<f32>,
    pub voiced: Vec<bool>,
}

impl F0Track {
    pub fn from_values(values: Vec<f32>) -> Self {
        let voiced = values.iter().map(|&v| v > 0.0).collect();
        F0Track { values, voiced }
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.voiced.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|&&v| v).count() as f64 / self.voiced.len() as f64
    }
}

/// Mel-cepstral frames, `[N, order]`, zeroth coefficient excluded.
#[derive(Debug, Clone)]
pub struct MccSequence {
    pub frames: Tensor<f32>,
    pub order: usize,
}

impl MccSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}
