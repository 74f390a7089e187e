//! Griffin-Lim phase retrieval: reconstruct a waveform whose STFT magnitude
//! approaches a target magnitude spectrogram.

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};

use super::stft::{frames_of_padded, istft_padded, ComplexFrames};
use super::{Spectrogram, Waveform};

/// Zero-phase-initialized Griffin-Lim. `seed` is reserved for an optional
/// random-phase initialization mode and is currently unused; the default
/// initialization is deterministic.
pub fn griffin_lim(spec: &Spectrogram, sample_rate_hz: u32, n_iters: usize, seed: u64) -> Result<Waveform> {
    griffin_lim_with_history(spec, sample_rate_hz, n_iters, seed).map(|(wav, _)| wav)
}

/// As [`griffin_lim`], also returning the spectral convergence
/// `||X| - M||_F / ||M||_F` measured at every iteration.
pub fn griffin_lim_with_history(
    spec: &Spectrogram,
    sample_rate_hz: u32,
    n_iters: usize,
    _seed: u64,
) -> Result<(Waveform, Vec<f64>)> {
    if n_iters == 0 {
        return Err(Error::Signal("griffin_lim requires at least one iteration".into()));
    }
    let n_bins = spec.fft_size / 2 + 1;
    if spec.mags.ncols() != n_bins {
        return Err(Error::Signal(format!(
            "spectrogram has {} bins but fft_size {} requires {}",
            spec.mags.ncols(),
            spec.fft_size,
            n_bins
        )));
    }
    let t = spec.n_frames();
    let out_len = t * spec.hop_size;
    let pad = spec.win_size / 2;
    let target_norm: f64 = spec.mags.iter().map(|&m| m * m).sum::<f64>().sqrt();

    // Momentum-accelerated alternating projections (momentum 0.99, the
    // conventional acceleration; plain updates need hundreds of iterations
    // on clean tones). The iteration lives in the padded domain so
    // analysis and synthesis form an exact pair; the final output crops
    // the analysis padding.
    const MOMENTUM: f64 = 0.99;
    let gamma = MOMENTUM / (1.0 + MOMENTUM);
    let mut angles = vec![vec![Complex::new(1.0, 0.0); n_bins]; t]; // zero phase
    let mut prev: Vec<Vec<Complex<f64>>> = vec![vec![Complex::new(0.0, 0.0); n_bins]; t];
    let mut history = Vec::with_capacity(n_iters);
    let mut padded = Vec::new();
    for _ in 0..n_iters {
        let frames: Vec<Vec<Complex<f64>>> = (0..t)
            .map(|ti| (0..n_bins).map(|k| angles[ti][k] * spec.mags[[ti, k]]).collect())
            .collect();
        let complex = ComplexFrames {
            frames,
            fft_size: spec.fft_size,
            hop_size: spec.hop_size,
            win_size: spec.win_size,
        };
        padded = istft_padded(&complex);
        let rebuilt = frames_of_padded(&padded, spec.fft_size, spec.hop_size, spec.win_size, t);
        let mut err = 0.0f64;
        for (ti, frame) in rebuilt.frames.iter().enumerate() {
            for (k, &c) in frame.iter().enumerate() {
                let d = c.norm() - spec.mags[[ti, k]];
                err += d * d;
                let accel = c - prev[ti][k] * gamma;
                angles[ti][k] = accel / (accel.norm() + 1e-16);
                prev[ti][k] = c;
            }
        }
        let convergence = if target_norm > 0.0 { err.sqrt() / target_norm } else { 0.0 };
        history.push(convergence);
    }
    let samples: Vec<f32> = (0..out_len)
        .map(|i| padded.get(i + pad).copied().unwrap_or(0.0) as f32)
        .collect();
    let wav = Waveform::new(sample_rate_hz, samples)?;
    Ok((wav, history))
}
