//! Mel-filterbank construction, log-mel features and DCT mel-cepstra.

use ndarray::Array2;

use crate::error::{Error, Result};

use super::{stft, FeatureKind, FeatureSeq, SignalConfig, Waveform};

pub(crate) const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels` rows by `fft_size/2 + 1` columns.
pub fn mel_matrix(
    n_mels: usize,
    fft_size: usize,
    sample_rate_hz: u32,
    fmin_hz: f64,
    fmax_hz: f64,
) -> Result<Array2<f64>> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if !(fmin_hz >= 0.0 && fmin_hz < fmax_hz && fmax_hz <= nyquist) {
        return Err(Error::Signal(format!(
            "mel range [{fmin_hz}, {fmax_hz}] must satisfy 0 <= fmin < fmax <= {nyquist}"
        )));
    }
    let n_bins = fft_size / 2 + 1;
    let mel_lo = hz_to_mel(fmin_hz);
    let mel_hi = hz_to_mel(fmax_hz);
    // n_mels + 2 edge points, uniformly spaced on the mel scale
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut mat = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row_sum = 0.0;
        for k in 0..n_bins {
            let f = k as f64 * sample_rate_hz as f64 / fft_size as f64;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            let w = up.min(down).max(0.0);
            mat[[m, k]] = w;
            row_sum += w;
        }
        if row_sum <= 0.0 {
            return Err(Error::Signal(format!(
                "mel filter {m} (center {center:.1} Hz) covers no FFT bin; \
                 reduce n_mels or increase fft_size"
            )));
        }
    }
    Ok(mat)
}

/// Natural-log mel spectrogram, floored at 1e-10 before the log.
pub fn log_mel_spectrogram(wav: &Waveform, cfg: &SignalConfig) -> Result<FeatureSeq> {
    let spec = stft(wav, cfg.fft_size, cfg.hop_size, cfg.win_size)?;
    let mel = mel_matrix(cfg.n_mels, cfg.fft_size, cfg.sample_rate_hz, cfg.fmin_hz, cfg.fmax_hz)?;
    let t = spec.n_frames();
    let mut out = Array2::zeros((t, cfg.n_mels));
    for ti in 0..t {
        for m in 0..cfg.n_mels {
            let mut acc = 0.0f64;
            for k in 0..spec.n_bins() {
                acc += mel[[m, k]] * spec.mags[[ti, k]];
            }
            out[[ti, m]] = acc.max(LOG_FLOOR).ln() as f32;
        }
    }
    Ok(FeatureSeq::new(out, FeatureKind::MelFilterbank))
}

/// Orthonormal DCT-II matrix, `order` rows by `d` columns.
pub fn dct_matrix(order: usize, d: usize) -> Array2<f64> {
    let mut mat = Array2::zeros((order, d));
    for k in 0..order {
        let scale = if k == 0 { (1.0 / d as f64).sqrt() } else { (2.0 / d as f64).sqrt() };
        for n in 0..d {
            mat[[k, n]] = scale * (std::f64::consts::PI * (n as f64 + 0.5) * k as f64 / d as f64).cos();
        }
    }
    mat
}

/// Per-frame orthonormal DCT-II of the log-mel channels, truncated to
/// `order` coefficients. The mel warping comes from the filterbank itself.
pub fn mel_cepstrum(logmel: &FeatureSeq, order: usize) -> Result<FeatureSeq> {
    let d = logmel.dim();
    if order > d {
        return Err(Error::Signal(format!("cepstrum order {order} exceeds feature dimension {d}")));
    }
    let dct = dct_matrix(order, d);
    let t = logmel.n_frames();
    let mut out = Array2::zeros((t, order));
    for ti in 0..t {
        for k in 0..order {
            let mut acc = 0.0f64;
            for n in 0..d {
                acc += dct[[k, n]] * logmel.data[[ti, n]] as f64;
            }
            out[[ti, k]] = acc as f32;
        }
    }
    Ok(FeatureSeq::new(out, FeatureKind::MelCepstrum))
}

/// Least-squares inversion of the mel filterbank (ridge-regularized normal
/// equations), with negative magnitudes clipped to zero. Used to hand
/// Griffin-Lim a linear-frequency magnitude spectrogram.
pub fn mel_to_linear(mel_frames: &Array2<f64>, mel: &Array2<f64>) -> Result<Array2<f64>> {
    let (n_mels, n_bins) = (mel.nrows(), mel.ncols());
    if mel_frames.ncols() != n_mels {
        return Err(Error::Signal(format!(
            "mel frame dimension {} does not match filterbank rows {}",
            mel_frames.ncols(),
            n_mels
        )));
    }
    // gram = M M^T + lambda I
    let mut gram = mel.dot(&mel.t());
    let lambda = 1e-8 * gram.diag().iter().sum::<f64>() / n_mels as f64;
    for i in 0..n_mels {
        gram[[i, i]] += lambda;
    }
    let chol = cholesky(&gram)?;

    let t = mel_frames.nrows();
    let mut out = Array2::zeros((t, n_bins));
    for ti in 0..t {
        let rhs: Vec<f64> = (0..n_mels).map(|m| mel_frames[[ti, m]]).collect();
        let alpha = chol_solve(&chol, &rhs);
        for k in 0..n_bins {
            let mut acc = 0.0;
            for m in 0..n_mels {
                acc += mel[[m, k]] * alpha[m];
            }
            out[[ti, k]] = acc.max(0.0);
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Signal("filterbank gram matrix is not positive definite".into()));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}
