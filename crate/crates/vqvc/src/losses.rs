//! The training loss catalog: reconstruction + codebook + commitment,
//! cyclic reconstruction, least-squares GAN with an auxiliary speaker
//! classifier, speaker-adversarial cross-entropy through a gradient
//! reversal layer, and the multiresolution STFT loss over feature
//! sequences.

use crate::autograd::{Scalar, Tape, TapeBinding, Value};
use crate::netblocks::SpeakerClassifier;
use crate::vqmodel::VqResult;

/// Which decoder output the adversarial loss sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvTarget {
    Reconstructed,
    Converted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    L1,
    L2,
    L1PlusStft,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Commitment-loss weight (the beta hyperparameter).
    pub beta: f64,
    pub cycle_weight: f64,
    pub adv_weight: f64,
    /// Gradient-reversal scale of the speaker-adversarial loss; zero
    /// disables the loss entirely.
    pub spkadv_lambda: f64,
    pub stft_weight: f64,
    pub adv_target: AdvTarget,
    pub recon_kind: ReconKind,
    /// (fft, hop, win) triples, applied along the time axis of each
    /// feature channel.
    pub stft_resolutions: Vec<(usize, usize, usize)>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.25,
            cycle_weight: 1.0,
            adv_weight: 1.0,
            spkadv_lambda: 0.1,
            stft_weight: 1.0,
            adv_target: AdvTarget::Converted,
            recon_kind: ReconKind::L2,
            stft_resolutions: vec![(64, 16, 32), (128, 32, 64), (256, 64, 128)],
        }
    }
}

/// Every scalar a training step produces. Absent terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub cycle: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub ac_real: f64,
    pub ac_fake: f64,
    pub spk_adv: f64,
    pub stft: f64,
    pub total: f64,
}

impl LossReport {
    pub const NAMES: [&'static str; 11] = [
        "reconstruction",
        "codebook",
        "commitment",
        "cycle",
        "adv_g",
        "adv_d",
        "ac_real",
        "ac_fake",
        "spk_adv",
        "stft",
        "total",
    ];

    pub fn rows(&self) -> [(&'static str, f64); 11] {
        [
            ("reconstruction", self.reconstruction),
            ("codebook", self.codebook),
            ("commitment", self.commitment),
            ("cycle", self.cycle),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("ac_real", self.ac_real),
            ("ac_fake", self.ac_fake),
            ("spk_adv", self.spk_adv),
            ("stft", self.stft),
            ("total", self.total),
        ]
    }

    /// The generator total implied by the parts and the configuration.
    /// `cycle` is already weighted internally; `adv_d`/`ac_real` belong to
    /// the discriminator pass and are excluded.
    pub fn weighted_sum(&self, cfg: &LossConfig) -> f64 {
        self.reconstruction
            + self.codebook
            + cfg.beta * self.commitment
            + self.cycle
            + cfg.adv_weight * (self.adv_g + self.ac_fake)
            + self.spk_adv
            + cfg.stft_weight * self.stft
    }
}

/// Eq.-(2)-style objective terms on the tape.
pub struct ObjectiveTerms {
    pub reconstruction: Value,
    /// Sum over stacks of codebook losses.
    pub codebook: Value,
    /// Sum over stacks of commitment losses (unweighted).
    pub commitment: Value,
    /// reconstruction + codebook + beta * commitment.
    pub total: Value,
}

/// Mean reconstruction error between two feature matrices, L2 (mean of
/// squares over all entries) or L1 (mean of absolute values).
pub fn reconstruction_loss<S: Scalar>(tape: &mut Tape<S>, x: Value, x_hat: Value, kind: ReconKind) -> Value {
    let diff = tape.sub(x, x_hat);
    match kind {
        ReconKind::L2 => {
            let sq = tape.square(diff);
            tape.mean(sq)
        }
        // the STFT add-on is applied by the caller
        ReconKind::L1 | ReconKind::L1PlusStft => {
            let a = tape.abs(diff);
            tape.mean(a)
        }
    }
}

/// The core objective: reconstruction plus per-stack codebook and
/// beta-weighted commitment losses, summed with equal stack weights.
pub fn vqvae_objective<S: Scalar>(
    tape: &mut Tape<S>,
    x: Value,
    x_hat: Value,
    vq_results: &[&VqResult],
    cfg: &LossConfig,
) -> ObjectiveTerms {
    let reconstruction = reconstruction_loss(tape, x, x_hat, cfg.recon_kind);
    let mut codebook: Option<Value> = None;
    let mut commitment: Option<Value> = None;
    for vq in vq_results {
        codebook = Some(match codebook {
            None => vq.codebook_loss,
            Some(acc) => tape.add(acc, vq.codebook_loss),
        });
        commitment = Some(match commitment {
            None => vq.commitment_loss,
            Some(acc) => tape.add(acc, vq.commitment_loss),
        });
    }
    let codebook = codebook.unwrap_or_else(|| tape.scalar(S::zero()));
    let commitment = commitment.unwrap_or_else(|| tape.scalar(S::zero()));
    let weighted_commit = tape.scale(commitment, cfg.beta);
    let partial = tape.add(reconstruction, codebook);
    let total = tape.add(partial, weighted_commit);
    ObjectiveTerms { reconstruction, codebook, commitment, total }
}

/// Cyclic objective: reconstruction between the original input and the
/// source-target-source round trip, plus the second pass's codebook and
/// commitment terms, all scaled by `cycle_weight` (zero weight removes the
/// term exactly).
pub fn cycle_objective<S: Scalar>(
    tape: &mut Tape<S>,
    x: Value,
    x_hat_cyc: Value,
    vq_second_pass: &[&VqResult],
    cfg: &LossConfig,
) -> Value {
    let recon = reconstruction_loss(tape, x, x_hat_cyc, cfg.recon_kind);
    let mut acc = recon;
    for vq in vq_second_pass {
        acc = tape.add(acc, vq.codebook_loss);
        let wc = tape.scale(vq.commitment_loss, cfg.beta);
        acc = tape.add(acc, wc);
    }
    tape.scale(acc, cfg.cycle_weight)
}

/// Least-squares GAN discriminator loss:
/// `0.5 mean[(real - 1)^2] + 0.5 mean[fake^2]`. The fake realness must be
/// computed on detached features so no gradient reaches the generator.
pub fn lsgan_d_loss<S: Scalar>(tape: &mut Tape<S>, realness_real: Value, realness_fake: Value) -> Value {
    let rm1 = tape.add_const(realness_real, -1.0);
    let rsq = tape.square(rm1);
    let r_term = tape.mean(rsq);
    let fsq = tape.square(realness_fake);
    let f_term = tape.mean(fsq);
    let half_r = tape.scale(r_term, 0.5);
    let half_f = tape.scale(f_term, 0.5);
    tape.add(half_r, half_f)
}

/// Least-squares GAN generator loss: `0.5 mean[(fake - 1)^2]`. The fake
/// path must be built with stop_gradient applied to the quantized latents
/// so this gradient reaches only the decoder.
pub fn lsgan_g_loss<S: Scalar>(tape: &mut Tape<S>, realness_fake: Value) -> Value {
    let fm1 = tape.add_const(realness_fake, -1.0);
    let sq = tape.square(fm1);
    let m = tape.mean(sq);
    tape.scale(m, 0.5)
}

pub fn lsgan_losses<S: Scalar>(tape: &mut Tape<S>, realness_real: Value, realness_fake: Value) -> (Value, Value) {
    let fake_detached = tape.stop_gradient(realness_fake);
    let d = lsgan_d_loss(tape, realness_real, fake_detached);
    let g = lsgan_g_loss(tape, realness_fake);
    (d, g)
}

/// Auxiliary-classifier cross-entropy on speaker logits.
pub fn ac_gan_loss<S: Scalar>(tape: &mut Tape<S>, speaker_logits: Value, true_speaker: usize) -> Value {
    tape.softmax_cross_entropy(speaker_logits, true_speaker)
}

/// Speaker-adversarial loss: concatenated pre-quantization latents routed
/// through a gradient reversal layer into the classifier, cross-entropy
/// against the true speaker. The encoder receives the negated gradient,
/// the classifier the ordinary one.
pub fn speaker_adversarial_loss<S: Scalar>(
    tape: &mut Tape<S>,
    binding: &TapeBinding,
    classifier: &SpeakerClassifier,
    h_per_stack: &[Value],
    true_speaker: usize,
    lambda: f64,
) -> Value {
    let h_cat = tape.concat(h_per_stack, 1);
    let logits = classifier.forward(tape, binding, h_cat, lambda);
    tape.softmax_cross_entropy(logits, true_speaker)
}

/// Spectral convergence and log-magnitude L1 for one STFT resolution of
/// two T x C feature sequences, or None (with a warning) when the sequence
/// is shorter than the window.
pub fn stft_loss_components<S: Scalar>(
    tape: &mut Tape<S>,
    x: Value,
    x_hat: Value,
    resolution: (usize, usize, usize),
) -> Option<(Value, Value)> {
    let (fft, hop, win) = resolution;
    assert_eq!(
        (x.rows, x.cols),
        (x_hat.rows, x_hat.cols),
        "stft loss: shape mismatch ({}x{} vs {}x{})",
        x.rows,
        x.cols,
        x_hat.rows,
        x_hat.cols
    );
    let (t_len, channels) = (x.rows, x.cols);
    if t_len < win {
        log::warn!("stft loss: sequence length {t_len} shorter than window {win}, skipping resolution {resolution:?}");
        return None;
    }
    let n_frames = (t_len - win) / hop + 1;
    let n_bins = fft / 2 + 1;

    // constant DFT operators: (bins x win) cosine/sine, window replicated
    // across channels
    let hann: Vec<f64> = (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
        .collect();
    let mut cos_t = Vec::with_capacity(n_bins * win);
    let mut sin_t = Vec::with_capacity(n_bins * win);
    for k in 0..n_bins {
        for n in 0..win {
            let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / fft as f64;
            cos_t.push(S::cast_from(ang.cos()));
            sin_t.push(S::cast_from(ang.sin()));
        }
    }
    let cos_t = tape.constant(n_bins, win, cos_t);
    let sin_t = tape.constant(n_bins, win, sin_t);
    let win_rep: Vec<S> = hann
        .iter()
        .flat_map(|&w| std::iter::repeat(S::cast_from(w)).take(channels))
        .collect();
    let win_rep = tape.constant(win, channels, win_rep);

    let magnitude = |tape: &mut Tape<S>, seq: Value, m: usize| -> Value {
        let frame = tape.slice(seq, 0, m * hop, m * hop + win);
        let windowed = tape.mul(frame, win_rep);
        let re = tape.matmul(cos_t, windowed);
        let im = tape.matmul(sin_t, windowed);
        let re2 = tape.square(re);
        let im2 = tape.square(im);
        let power = tape.add(re2, im2);
        let floored = tape.add_const(power, 1e-12);
        tape.sqrt(floored)
    };

    let ones_bins = tape.ones(1, n_bins);
    let mut num_colsum: Option<Value> = None; // per-channel sum of (|X|-|Xh|)^2
    let mut den_colsum: Option<Value> = None; // per-channel sum of |X|^2
    let mut logmag_sum: Option<Value> = None;
    for m in 0..n_frames {
        let mag_x = magnitude(tape, x, m);
        let mag_h = magnitude(tape, x_hat, m);
        let diff = tape.sub(mag_x, mag_h);
        let diff2 = tape.square(diff);
        let num = tape.matmul(ones_bins, diff2);
        let x2 = tape.square(mag_x);
        let den = tape.matmul(ones_bins, x2);
        num_colsum = Some(match num_colsum {
            None => num,
            Some(acc) => tape.add(acc, num),
        });
        den_colsum = Some(match den_colsum {
            None => den,
            Some(acc) => tape.add(acc, den),
        });
        let log_x = tape.log(mag_x);
        let log_h = tape.log(mag_h);
        let ldiff = tape.sub(log_x, log_h);
        let labs = tape.abs(ldiff);
        let lsum = tape.sum(labs);
        logmag_sum = Some(match logmag_sum {
            None => lsum,
            Some(acc) => tape.add(acc, lsum),
        });
    }
    let num = num_colsum.unwrap();
    let den = den_colsum.unwrap();
    // spectral convergence per channel, then averaged over channels
    let num_n = tape.sqrt(num);
    let den_floored = tape.add_const(den, 1e-12);
    let den_n = tape.sqrt(den_floored);
    let ratio = tape.div(num_n, den_n);
    let sc = tape.mean(ratio);
    let count = (n_frames * n_bins * channels) as f64;
    let lm = tape.scale(logmag_sum.unwrap(), 1.0 / count);
    Some((sc, lm))
}

/// Multiresolution STFT loss: spectral convergence plus log-magnitude L1
/// per resolution, averaged over the resolutions that fit the sequence.
pub fn multires_stft_loss<S: Scalar>(
    tape: &mut Tape<S>,
    x: Value,
    x_hat: Value,
    resolutions: &[(usize, usize, usize)],
) -> Value {
    let mut acc: Option<Value> = None;
    let mut used = 0usize;
    for &res in resolutions {
        if let Some((sc, lm)) = stft_loss_components(tape, x, x_hat, res) {
            let term = tape.add(sc, lm);
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term),
            });
            used += 1;
        }
    }
    match acc {
        None => tape.scalar(S::zero()),
        Some(a) => tape.scale(a, 1.0 / used as f64),
    }
}
