//! Autocorrelation F0 extraction and continuous log-F0 conditioning.

use crate::error::{Error, Result};

use super::stft::frame_signal;
use super::{F0Contour, SignalConfig, SpeakerStats, Waveform};

const VOICING_THRESHOLD: f64 = 0.3;
const ENERGY_GATE_RMS: f64 = 1e-4;

/// Per-frame normalized autocorrelation peak search. Framing matches the
/// spectrogram framing so F0 frames align with feature frames.
pub fn extract_f0(wav: &Waveform, cfg: &SignalConfig) -> Result<F0Contour> {
    if cfg.f0_min_hz >= cfg.f0_max_hz {
        return Err(Error::Signal(format!(
            "f0 search range [{}, {}] is empty",
            cfg.f0_min_hz, cfg.f0_max_hz
        )));
    }
    if wav.is_empty() {
        return Err(Error::Signal("cannot extract F0 from an empty waveform".into()));
    }
    let sr = wav.sample_rate_hz as f64;
    let win = cfg.win_size;
    let lag_min = (sr / cfg.f0_max_hz).floor().max(2.0) as usize;
    let lag_max = ((sr / cfg.f0_min_hz).ceil() as usize).min(win - 2);
    if lag_min >= lag_max {
        return Err(Error::Signal("window too short for the configured F0 range".into()));
    }

    let (frames, n_frames) = frame_signal(&wav.samples, cfg.hop_size, win);
    let mut f0_hz = vec![0.0f64; n_frames];
    let mut voiced = vec![false; n_frames];

    let mut ncc = vec![0.0f64; lag_max + 1];
    for (t, frame) in frames.iter().enumerate() {
        let energy: f64 = frame.iter().map(|x| x * x).sum();
        let rms = (energy / win as f64).sqrt();
        if rms < ENERGY_GATE_RMS {
            continue;
        }
        // normalized cross-correlation over the overlapping region
        let mut best = 0.0f64;
        for lag in lag_min..=lag_max {
            let n = win - lag;
            let mut dot = 0.0;
            let mut e0 = 0.0;
            let mut e1 = 0.0;
            for i in 0..n {
                dot += frame[i] * frame[i + lag];
                e0 += frame[i] * frame[i];
                e1 += frame[i + lag] * frame[i + lag];
            }
            let denom = (e0 * e1).sqrt();
            ncc[lag] = if denom > 1e-20 { dot / denom } else { 0.0 };
            if ncc[lag] > best {
                best = ncc[lag];
            }
        }
        if best < VOICING_THRESHOLD {
            continue;
        }
        // prefer the shortest lag among near-best peaks to avoid octave drops
        let mut lag_pick = lag_min;
        let mut found = false;
        for lag in lag_min..=lag_max {
            let is_peak = (lag == lag_min || ncc[lag] >= ncc[lag - 1]) && (lag == lag_max || ncc[lag] >= ncc[lag + 1]);
            if is_peak && ncc[lag] >= 0.85 * best {
                lag_pick = lag;
                found = true;
                break;
            }
        }
        if !found {
            continue;
        }
        // parabolic refinement around the picked lag
        let mut lag_refined = lag_pick as f64;
        if lag_pick > lag_min && lag_pick < lag_max {
            let (a, b, c) = (ncc[lag_pick - 1], ncc[lag_pick], ncc[lag_pick + 1]);
            let denom = a - 2.0 * b + c;
            if denom.abs() > 1e-12 {
                let delta = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
                lag_refined += delta;
            }
        }
        let f0 = (sr / lag_refined).clamp(cfg.f0_min_hz, cfg.f0_max_hz);
        f0_hz[t] = f0;
        voiced[t] = true;
    }
    Ok(F0Contour { f0_hz, voiced })
}

/// Log-F0 with unvoiced gaps filled: interior gaps are linearly
/// interpolated, edge gaps hold the nearest voiced value. Returns an empty
/// vector when the contour has no voiced frame at all.
pub fn interpolate_logf0(f0: &F0Contour) -> Vec<f64> {
    let t = f0.len();
    let voiced_idx: Vec<usize> = (0..t).filter(|&i| f0.voiced[i]).collect();
    if voiced_idx.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0f64; t];
    let first = voiced_idx[0];
    let last = *voiced_idx.last().unwrap();
    for i in 0..t {
        if f0.voiced[i] {
            out[i] = f0.f0_hz[i].ln();
        }
    }
    for i in 0..first {
        out[i] = f0.f0_hz[first].ln();
    }
    for i in last + 1..t {
        out[i] = f0.f0_hz[last].ln();
    }
    // interior gaps
    for w in voiced_idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b > a + 1 {
            let va = f0.f0_hz[a].ln();
            let vb = f0.f0_hz[b].ln();
            for i in a + 1..b {
                let alpha = (i - a) as f64 / (b - a) as f64;
                out[i] = va + alpha * (vb - va);
            }
        }
    }
    out
}

/// Speaker-normalized continuous log-F0 and the voiced/unvoiced symbol.
/// An all-unvoiced utterance yields lcf0 identically zero (mean fill) and
/// logs a warning.
pub fn continuous_logf0(f0: &F0Contour, stats: &SpeakerStats) -> (Vec<f32>, Vec<f32>) {
    let t = f0.len();
    let uv: Vec<f32> = f0.voiced.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let raw = interpolate_logf0(f0);
    if raw.is_empty() {
        log::warn!("all-unvoiced utterance: filling normalized lcf0 with zeros");
        return (vec![0.0; t], uv);
    }
    let lcf0 = raw
        .iter()
        .map(|&v| ((v - stats.lcf0_mean) / stats.lcf0_std) as f32)
        .collect();
    (lcf0, uv)
}
