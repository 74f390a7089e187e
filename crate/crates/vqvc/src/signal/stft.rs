//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Frames are centered: the signal is reflect-padded by `win_size / 2` on
//! both ends so that frame `t` is centered on sample `t * hop_size` and the
//! frame count is `ceil(len / hop_size)`.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

use super::{Spectrogram, Waveform};

/// One-sided complex STFT (T frames by fft_size/2 + 1 bins), phase included.
#[derive(Debug, Clone)]
pub struct ComplexFrames {
    pub frames: Vec<Vec<Complex<f64>>>,
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
}

impl ComplexFrames {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        let t = self.frames.len();
        let f = self.fft_size / 2 + 1;
        let mut mags = Array2::zeros((t, f));
        for (i, frame) in self.frames.iter().enumerate() {
            for (j, c) in frame.iter().enumerate() {
                mags[[i, j]] = c.norm();
            }
        }
        mags
    }
}

/// Periodic Hann window.
pub(crate) fn hann_window(size: usize) -> Vec<f64> {
    (0..size)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / size as f64).cos())
        .collect()
}

/// Reflect-pad index (no edge duplication), folding until in range.
fn mirror(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Centered frames of the reflect-padded signal, in f64.
pub(crate) fn frame_signal(samples: &[f32], hop_size: usize, win_size: usize) -> (Vec<Vec<f64>>, usize) {
    let len = samples.len();
    let n_frames = len.div_ceil(hop_size);
    let pad = win_size / 2;
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t as isize * hop_size as isize - pad as isize;
        let frame: Vec<f64> = (0..win_size)
            .map(|n| samples[mirror(start + n as isize, len)] as f64)
            .collect();
        frames.push(frame);
    }
    (frames, n_frames)
}

fn check_sizes(fft_size: usize, hop_size: usize, win_size: usize) -> Result<()> {
    if hop_size == 0 {
        return Err(Error::Signal("hop_size must be positive".into()));
    }
    if win_size == 0 || win_size > fft_size {
        return Err(Error::Signal(format!(
            "win_size {win_size} must satisfy 0 < win_size <= fft_size {fft_size}"
        )));
    }
    if hop_size > win_size {
        return Err(Error::Signal(format!("hop_size {hop_size} exceeds win_size {win_size}")));
    }
    Ok(())
}

/// Complex STFT of a sample buffer. The window is Hann; frames are
/// zero-padded on the right up to `fft_size`.
pub fn stft_complex(samples: &[f32], fft_size: usize, hop_size: usize, win_size: usize) -> Result<ComplexFrames> {
    check_sizes(fft_size, hop_size, win_size)?;
    if samples.is_empty() {
        return Err(Error::Signal("cannot analyze an empty waveform".into()));
    }
    let window = hann_window(win_size);
    let (frames, n_frames) = frame_signal(samples, hop_size, win_size);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let n_bins = fft_size / 2 + 1;

    let mut out = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for frame in &frames {
        for b in buf.iter_mut() {
            *b = Complex::new(0.0, 0.0);
        }
        for (n, (&x, &w)) in frame.iter().zip(&window).enumerate() {
            buf[n] = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..n_bins].to_vec());
    }
    Ok(ComplexFrames { frames: out, fft_size, hop_size, win_size })
}

/// Magnitude STFT.
pub fn stft(wav: &Waveform, fft_size: usize, hop_size: usize, win_size: usize) -> Result<Spectrogram> {
    let complex = stft_complex(&wav.samples, fft_size, hop_size, win_size)?;
    Spectrogram::new(complex.magnitudes(), fft_size, hop_size, win_size)
}

/// Weighted overlap-add inverse of [`stft_complex`]. Returns `out_len`
/// samples; the reflect padding applied during analysis is cropped away.
pub fn istft(frames: &ComplexFrames, out_len: usize) -> Vec<f64> {
    let pad = frames.win_size / 2;
    let padded = istft_padded(frames);
    (0..out_len)
        .map(|i| padded.get(i + pad).copied().unwrap_or(0.0))
        .collect()
}

/// Overlap-add synthesis over the padded domain (no cropping): the exact
/// counterpart of [`frames_of_padded`], used by Griffin-Lim iterations.
pub(crate) fn istft_padded(frames: &ComplexFrames) -> Vec<f64> {
    let fft_size = frames.fft_size;
    let win_size = frames.win_size;
    let hop = frames.hop_size;
    let n_frames = frames.frames.len();
    let padded_len = if n_frames == 0 { 0 } else { (n_frames - 1) * hop + win_size };

    let window = hann_window(win_size);
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(fft_size);

    let mut acc = vec![0.0f64; padded_len];
    let mut wsum = vec![0.0f64; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let n_bins = fft_size / 2 + 1;
    for (t, frame) in frames.frames.iter().enumerate() {
        for (k, c) in frame.iter().enumerate() {
            buf[k] = *c;
        }
        // hermitian symmetry for the real inverse
        for k in n_bins..fft_size {
            buf[k] = frame[fft_size - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for n in 0..win_size {
            let y = buf[n].re / fft_size as f64;
            acc[start + n] += window[n] * y;
            wsum[start + n] += window[n] * window[n];
        }
    }
    for (a, &w) in acc.iter_mut().zip(&wsum) {
        if w > 1e-12 {
            *a /= w;
        } else {
            *a = 0.0;
        }
    }
    acc
}

/// Analysis of an already-padded signal: frame t is `signal[t*hop ..
/// t*hop + win]`, no further padding. The counterpart of
/// [`istft_padded`].
pub(crate) fn frames_of_padded(
    signal: &[f64],
    fft_size: usize,
    hop_size: usize,
    win_size: usize,
    n_frames: usize,
) -> ComplexFrames {
    debug_assert!(signal.len() >= (n_frames - 1) * hop_size + win_size);
    let window = hann_window(win_size);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let n_bins = fft_size / 2 + 1;
    let mut out = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for t in 0..n_frames {
        for b in buf.iter_mut() {
            *b = Complex::new(0.0, 0.0);
        }
        for n in 0..win_size {
            buf[n] = Complex::new(signal[t * hop_size + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..n_bins].to_vec());
    }
    ComplexFrames { frames: out, fft_size, hop_size, win_size }
}
