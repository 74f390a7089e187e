//! Deterministic DSP: STFT analysis/synthesis, mel-filterbank features,
//! mel-cepstra, F0 extraction, conditioning features and Griffin-Lim
//! waveform reconstruction.
//!
//! Everything here is pure: the same input and configuration produce
//! bit-identical output.

mod f0;
mod features;
mod griffin_lim;
mod mel;
mod stats;
mod stft;
mod wav;

pub use f0::{continuous_logf0, extract_f0, interpolate_logf0};
pub use features::{load_f0, load_feature_seq, save_f0, save_feature_seq};
pub use griffin_lim::{griffin_lim, griffin_lim_with_history};
pub use mel::{dct_matrix, log_mel_spectrogram, mel_cepstrum, mel_matrix, mel_to_linear};
pub use stats::compute_speaker_stats;
pub use stft::{istft, stft, stft_complex, ComplexFrames};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use ndarray::Array2;

/// Analysis parameters shared by every DSP operation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    pub sample_rate_hz: u32,
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// Number of retained cepstral coefficients (c0..c_{order-1}).
    pub mcep_order: usize,
    pub griffin_lim_iters: usize,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            sample_rate_hz: 22050,
            fft_size: 1024,
            hop_size: 256,
            win_size: 1024,
            n_mels: 80,
            fmin_hz: 70.0,
            fmax_hz: 8000.0,
            f0_min_hz: 70.0,
            f0_max_hz: 400.0,
            mcep_order: 35,
            griffin_lim_iters: 60,
        }
    }
}

/// Mono audio at a fixed sample rate. Samples are nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate_hz: u32,
    pub samples: Vec<f32>,
}

impl Waveform {
    pub fn new(sample_rate_hz: u32, samples: Vec<f32>) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Signal("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Signal(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { sample_rate_hz, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Magnitude spectrogram, frames (T) by bins (fft_size/2 + 1).
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub mags: Array2<f64>,
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
}

impl Spectrogram {
    pub fn new(mags: Array2<f64>, fft_size: usize, hop_size: usize, win_size: usize) -> Result<Self> {
        if hop_size == 0 || win_size > fft_size || hop_size > win_size {
            return Err(Error::Signal(format!(
                "invalid frame sizes: hop {hop_size}, win {win_size}, fft {fft_size} (need 0 < hop <= win <= fft)"
            )));
        }
        if mags.ncols() != fft_size / 2 + 1 {
            return Err(Error::Signal(format!(
                "spectrogram has {} bins, fft size {} requires {}",
                mags.ncols(),
                fft_size,
                fft_size / 2 + 1
            )));
        }
        if mags.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::Signal("spectrogram magnitudes must be finite and non-negative".into()));
        }
        Ok(Spectrogram { mags, fft_size, hop_size, win_size })
    }

    pub fn n_frames(&self) -> usize {
        self.mags.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.mags.ncols()
    }
}

/// Identifies what a feature matrix holds. The discriminant doubles as the
/// on-disk kind code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FeatureKind {
    MelFilterbank = 0,
    MelCepstrum = 1,
    Latent = 2,
}

impl FeatureKind {
    pub fn from_code(code: u8) -> Option<FeatureKind> {
        match code {
            0 => Some(FeatureKind::MelFilterbank),
            1 => Some(FeatureKind::MelCepstrum),
            2 => Some(FeatureKind::Latent),
            _ => None,
        }
    }
}

/// A T-by-D feature matrix (mel-filterbank frames, mel-cepstra or latents).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub data: Array2<f32>,
    pub kind: FeatureKind,
}

impl FeatureSeq {
    pub fn new(data: Array2<f32>, kind: FeatureKind) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()), "feature matrix contains non-finite entries");
        FeatureSeq { data, kind }
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Per-frame fundamental frequency; `f0_hz[t] > 0` exactly when `voiced[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Contour {
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Contour {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn n_voiced(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }
}

/// Decoder conditioning for one utterance: speaker-normalized continuous
/// log-F0, the voiced/unvoiced symbol and the speaker index.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxFeatures {
    pub lcf0: Vec<f32>,
    pub uv: Vec<f32>,
    pub speaker_index: usize,
}

impl AuxFeatures {
    pub fn len(&self) -> usize {
        self.lcf0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lcf0.is_empty()
    }
}

/// Per-speaker normalization statistics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpeakerStats {
    pub speaker_index: usize,
    pub lcf0_mean: f64,
    pub lcf0_std: f64,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
}
