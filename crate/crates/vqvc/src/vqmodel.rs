//! Three-stack hierarchical vector-quantized autoencoder: encoders chained
//! bottom -> middle -> top, per-stack quantizers with straight-through
//! gradients, top/middle decoders feeding information back down, and a
//! bottom decoder that consumes all quantized streams plus the auxiliary
//! conditioning.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autograd::{
    load_checkpoint, save_checkpoint, ParamStore, Scalar, Tape, TapeBinding, Tensor, Value,
};
use crate::error::{Error, Result};
use crate::netblocks::{Discriminator, FeatureNet, SpeakerClassifier, WaveNetBlockConfig};
use crate::signal::{continuous_logf0, AuxFeatures, F0Contour, FeatureKind, FeatureSeq, SpeakerStats};

pub const STACKS: [&str; 3] = ["bottom", "middle", "top"];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub n_speakers: usize,
    pub speaker_embed_dim: usize,
    pub block: WaveNetBlockConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 80,
            latent_dim: 32,
            codebook_size: 32,
            n_speakers: 4,
            speaker_embed_dim: 8,
            block: WaveNetBlockConfig::default(),
        }
    }
}

impl ModelConfig {
    /// lcf0 + uv + speaker embedding.
    pub fn aux_dim(&self) -> usize {
        2 + self.speaker_embed_dim
    }
}

/// Result of quantizing one latent sequence against one codebook.
pub struct VqResult {
    /// Straight-through value fed downstream: forward equals the codebook
    /// rows, backward passes gradients to the encoder unchanged.
    pub quantized_st: Value,
    /// Raw codebook lookup; the gradient path into the codebook.
    pub quantized_raw: Value,
    pub indices: Vec<usize>,
    /// mean_t ||sg[h_t] - e_{k(t)}||^2 — pulls codebook entries toward the
    /// encoder output.
    pub codebook_loss: Value,
    /// mean_t ||h_t - sg[e_{k(t)}]||^2 — pulls the encoder toward its
    /// assigned entries (weighted by beta downstream).
    pub commitment_loss: Value,
}

/// Nearest-neighbor quantization with lowest-index tie-break and
/// straight-through gradients.
pub fn quantize<S: Scalar>(tape: &mut Tape<S>, h: Value, codebook: Value) -> VqResult {
    assert_eq!(
        h.cols, codebook.cols,
        "quantize: latent dimension {} does not match codebook width {}",
        h.cols, codebook.cols
    );
    let t_len = h.rows;
    let dz = h.cols;
    let k = codebook.rows;
    let indices: Vec<usize> = {
        let hd = tape.data(h);
        let cd = tape.data(codebook);
        (0..t_len)
            .map(|t| {
                let frame = &hd[t * dz..(t + 1) * dz];
                let mut best = 0usize;
                let mut best_dist = S::infinity();
                for j in 0..k {
                    let entry = &cd[j * dz..(j + 1) * dz];
                    let mut dist = S::zero();
                    for (&a, &b) in frame.iter().zip(entry) {
                        let d = a - b;
                        dist += d * d;
                    }
                    if dist < best_dist {
                        best_dist = dist;
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    let q = tape.embedding_lookup(codebook, &indices);
    // straight-through: forward q, backward identity onto h
    let q_minus_h = tape.sub(q, h);
    let sg = tape.stop_gradient(q_minus_h);
    let quantized_st = tape.add(h, sg);

    let sg_h = tape.stop_gradient(h);
    let cb_diff = tape.sub(sg_h, q);
    let cb_sq = tape.square(cb_diff);
    let cb_sum = tape.sum(cb_sq);
    let codebook_loss = tape.scale(cb_sum, 1.0 / t_len as f64);

    let sg_q = tape.stop_gradient(q);
    let cm_diff = tape.sub(h, sg_q);
    let cm_sq = tape.square(cm_diff);
    let cm_sum = tape.sum(cm_sq);
    let commitment_loss = tape.scale(cm_sum, 1.0 / t_len as f64);

    VqResult { quantized_st, quantized_raw: q, indices, codebook_loss, commitment_loss }
}

/// Everything one hierarchical forward pass produces.
pub struct HierarchicalOutput {
    /// T x feat_dim reconstruction.
    pub x_hat: Value,
    /// Per-stack quantization results, ordered bottom, middle, top.
    pub vq: [VqResult; 3],
    /// Per-stack pre-quantization latents, ordered bottom, middle, top.
    pub h: [Value; 3],
    /// Concatenated straight-through streams (bottom | middle | top),
    /// the bottom decoder input.
    pub q_cat: Value,
}

/// The model: configuration plus named parameters.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub enc_bottom: FeatureNet,
    pub enc_middle: FeatureNet,
    pub enc_top: FeatureNet,
    pub dec_top: FeatureNet,
    pub dec_middle: FeatureNet,
    pub dec_bottom: FeatureNet,
    pub discriminator: Discriminator,
    pub speaker_classifier: SpeakerClassifier,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Model {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dz = cfg.latent_dim;
        let aux = cfg.aux_dim();
        let block = &cfg.block;

        let enc_bottom = FeatureNet::register(&mut store, &mut rng, "enc/bottom", cfg.feat_dim, None, dz, block);
        let enc_middle = FeatureNet::register(&mut store, &mut rng, "enc/middle", dz, None, dz, block);
        let enc_top = FeatureNet::register(&mut store, &mut rng, "enc/top", dz, None, dz, block);
        let dec_top = FeatureNet::register(&mut store, &mut rng, "dec/top", dz, None, dz, block);
        let dec_middle = FeatureNet::register(&mut store, &mut rng, "dec/middle", dz, None, dz, block);
        let dec_bottom = FeatureNet::register(&mut store, &mut rng, "dec/bottom", 3 * dz, Some(aux), cfg.feat_dim, block);

        // codebooks start in a small box around the origin
        let k = cfg.codebook_size;
        let scale = 1.0 / k as f64;
        for stack in STACKS {
            let data: Vec<f32> = (0..k * dz)
                .map(|_| rand::Rng::gen_range(&mut rng, -scale..scale) as f32)
                .collect();
            store.insert(format!("codebook/{stack}"), Tensor::new(vec![k, dz], data));
        }

        // speaker embeddings: generator-side and discriminator-side tables
        // are separate so the two optimizers never touch shared state
        let emb_scale = (1.0 / cfg.speaker_embed_dim as f64).sqrt();
        for name in ["dec/spk_embed", "disc/spk_embed"] {
            let data: Vec<f32> = (0..cfg.n_speakers * cfg.speaker_embed_dim)
                .map(|_| rand::Rng::gen_range(&mut rng, -emb_scale..emb_scale) as f32)
                .collect();
            store.insert(name, Tensor::new(vec![cfg.n_speakers, cfg.speaker_embed_dim], data));
        }

        let discriminator =
            Discriminator::register(&mut store, &mut rng, "disc", cfg.feat_dim, Some(aux), cfg.n_speakers, block);
        let speaker_classifier =
            SpeakerClassifier::register(&mut store, &mut rng, "spkclf", 3 * dz, cfg.n_speakers, block);

        Model {
            cfg,
            params: store,
            enc_bottom,
            enc_middle,
            enc_top,
            dec_top,
            dec_middle,
            dec_bottom,
            discriminator,
            speaker_classifier,
        }
    }

    /// Total scalar parameter count; a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Conditioning matrix for one utterance: [lcf0 | uv | speaker
    /// embedding rows], using the named embedding table.
    pub fn aux_matrix<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &TapeBinding,
        table: &str,
        aux: &AuxFeatures,
    ) -> Value {
        assert!(
            aux.speaker_index < self.cfg.n_speakers,
            "speaker index {} out of range ({} speakers)",
            aux.speaker_index,
            self.cfg.n_speakers
        );
        let t = aux.len();
        let lcf0: Vec<S> = aux.lcf0.iter().map(|&v| S::cast_from(v as f64)).collect();
        let uv: Vec<S> = aux.uv.iter().map(|&v| S::cast_from(v as f64)).collect();
        let lcf0 = tape.constant(t, 1, lcf0);
        let uv = tape.constant(t, 1, uv);
        let emb_table = binding.value(table);
        let emb = tape.slice(emb_table, 0, aux.speaker_index, aux.speaker_index + 1);
        let emb_rows = tape.broadcast_rows(emb, t);
        tape.concat(&[lcf0, uv, emb_rows], 1)
    }

    /// Full hierarchical forward pass: encode, quantize each stack, decode
    /// with the given conditioning.
    pub fn forward_hierarchical<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &TapeBinding,
        x: Value,
        aux: Value,
    ) -> HierarchicalOutput {
        assert_eq!(
            aux.rows, x.rows,
            "aux length {} does not match feature length {}",
            aux.rows, x.rows
        );
        let cb_bottom = binding.value("codebook/bottom");
        let cb_middle = binding.value("codebook/middle");
        let cb_top = binding.value("codebook/top");

        // encoders in sequence, each consuming the previous output
        let e_bottom = self.enc_bottom.forward(tape, binding, x, None);
        let e_middle = self.enc_middle.forward(tape, binding, e_bottom, None);
        let h_top = self.enc_top.forward(tape, binding, e_middle, None);

        // top stack quantizes first; its decoder output adjusts the middle
        // encoder output before the middle quantizer, and so on down
        let vq_top = quantize(tape, h_top, cb_top);
        let d_top = self.dec_top.forward(tape, binding, vq_top.quantized_st, None);
        let h_middle = tape.add(e_middle, d_top);
        let vq_middle = quantize(tape, h_middle, cb_middle);
        let d_middle = self.dec_middle.forward(tape, binding, vq_middle.quantized_st, None);
        let h_bottom = tape.add(e_bottom, d_middle);
        let vq_bottom = quantize(tape, h_bottom, cb_bottom);

        let q_cat = tape.concat(
            &[vq_bottom.quantized_st, vq_middle.quantized_st, vq_top.quantized_st],
            1,
        );
        let x_hat = self.dec_bottom.forward(tape, binding, q_cat, Some(aux));
        HierarchicalOutput {
            x_hat,
            vq: [vq_bottom, vq_middle, vq_top],
            h: [h_bottom, h_middle, h_top],
            q_cat,
        }
    }

    /// Re-decode a quantized stream under different conditioning (the
    /// conversion and adversarial paths).
    pub fn decode_bottom<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &TapeBinding,
        q_cat: Value,
        aux: Value,
    ) -> Value {
        self.dec_bottom.forward(tape, binding, q_cat, Some(aux))
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &[(String, Tensor)]) -> Result<()> {
        let tensors = self
            .params
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .chain(extra.iter().map(|(n, t)| (n.as_str(), t)));
        save_checkpoint(path, tensors)
    }

    /// Load model parameters from a checkpoint, returning any non-model
    /// tensors (optimizer state) alongside.
    pub fn load(cfg: ModelConfig, path: impl AsRef<Path>) -> Result<(Model, BTreeMap<String, Tensor>)> {
        let path = path.as_ref();
        let mut tensors = load_checkpoint(path)?;
        let mut model = Model::init(cfg, 0);
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            let loaded = tensors.remove(&name).ok_or_else(|| {
                Error::Format(format!("{}: checkpoint is missing tensor {name}", path.display()))
            })?;
            let slot = model.params.get_mut(&name);
            if loaded.shape != slot.shape {
                return Err(Error::Format(format!(
                    "{}: tensor {name} has shape {:?}, expected {:?}",
                    path.display(),
                    loaded.shape,
                    slot.shape
                )));
            }
            *slot = loaded;
        }
        Ok((model, tensors))
    }
}

/// Output of the conversion path.
pub struct ConversionOutput {
    /// Converted mel-filterbank features in raw (de-normalized) space.
    pub features: FeatureSeq,
    /// Per-stack quantizer indices, ordered bottom, middle, top.
    pub indices: [Vec<usize>; 3],
}

/// Convert one utterance: z-score the source features under the source
/// speaker statistics, encode and quantize exactly as in training, decode
/// under the target speaker's conditioning, then de-normalize under the
/// target statistics.
///
/// The auxiliary log-F0 is the classical linear transform: z-scored under
/// source statistics (de-normalizing with target statistics and
/// re-normalizing cancels, so the decoder sees the source z-scores while
/// the implied raw contour follows the target distribution).
pub fn convert(
    model: &Model,
    feats_raw: &FeatureSeq,
    f0: &F0Contour,
    src_stats: &SpeakerStats,
    tgt_stats: &SpeakerStats,
    target_speaker: usize,
) -> Result<ConversionOutput> {
    if target_speaker >= model.cfg.n_speakers {
        return Err(Error::Eval(format!(
            "unknown speaker index {target_speaker} (model has {} speakers)",
            model.cfg.n_speakers
        )));
    }
    let t = feats_raw.n_frames();
    if f0.len() != t {
        return Err(Error::Eval(format!(
            "F0 contour length {} does not match feature length {t}",
            f0.len()
        )));
    }
    let d = feats_raw.dim();
    if d != model.cfg.feat_dim {
        return Err(Error::Eval(format!(
            "feature dimension {d} does not match model feat_dim {}",
            model.cfg.feat_dim
        )));
    }

    let mut tape = Tape::<f32>::new();
    let binding = TapeBinding::bind(&mut tape, &model.params, false);

    let mut norm = vec![0.0f32; t * d];
    for ti in 0..t {
        for di in 0..d {
            norm[ti * d + di] =
                ((feats_raw.data[[ti, di]] as f64 - src_stats.feat_mean[di]) / src_stats.feat_std[di]) as f32;
        }
    }
    let x = tape.leaf(t, d, norm, false);

    let (lcf0, uv) = continuous_logf0(f0, src_stats);
    let aux = AuxFeatures { lcf0, uv, speaker_index: target_speaker };
    let aux_mat = model.aux_matrix(&mut tape, &binding, "dec/spk_embed", &aux);

    let out = model.forward_hierarchical(&mut tape, &binding, x, aux_mat);
    let y = tape.data(out.x_hat);
    let mut denorm = Array2::zeros((t, d));
    for ti in 0..t {
        for di in 0..d {
            denorm[[ti, di]] =
                (y[ti * d + di] as f64 * tgt_stats.feat_std[di] + tgt_stats.feat_mean[di]) as f32;
        }
    }
    let [vq_b, vq_m, vq_t] = out.vq;
    Ok(ConversionOutput {
        features: FeatureSeq::new(denorm, FeatureKind::MelFilterbank),
        indices: [vq_b.indices, vq_m.indices, vq_t.indices],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 6,
            latent_dim: 4,
            codebook_size: 5,
            n_speakers: 3,
            speaker_embed_dim: 2,
            block: WaveNetBlockConfig { layers_per_stack: 2, channels: 4, kernel_size: 3, causal: true },
        }
    }

    fn aux_for(t: usize, speaker: usize) -> AuxFeatures {
        AuxFeatures {
            lcf0: (0..t).map(|i| (i as f32 * 0.1).sin()).collect(),
            uv: (0..t).map(|i| (i % 3 != 0) as u8 as f32).collect(),
            speaker_index: speaker,
        }
    }

    #[test]
    fn quantize_matches_hand_example() {
        let mut tape = Tape::<f64>::new();
        let cb = tape.leaf(2, 2, vec![0.0, 0.0, 1.0, 1.0], true);
        let h = tape.leaf(1, 2, vec![0.2, 0.1], true);
        let vq = quantize(&mut tape, h, cb);
        assert_eq!(vq.indices, vec![0]);
        assert_eq!(tape.data(vq.quantized_st), &[0.0, 0.0]);
        // commitment: ||(0.2,0.1) - (0,0)||^2 = 0.05
        assert!((tape.scalar_value(vq.commitment_loss) - 0.05).abs() < 1e-12);
        assert!((tape.scalar_value(vq.codebook_loss) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn exact_codebook_hit_has_zero_losses() {
        let mut tape = Tape::<f64>::new();
        let cb = tape.leaf(3, 2, vec![0.0, 0.0, 0.7, -0.3, 1.0, 1.0], true);
        let h = tape.leaf(1, 2, vec![0.7, -0.3], true);
        let vq = quantize(&mut tape, h, cb);
        assert_eq!(vq.indices, vec![1]);
        assert_eq!(tape.scalar_value(vq.codebook_loss), 0.0);
        assert_eq!(tape.scalar_value(vq.commitment_loss), 0.0);
    }

    #[test]
    fn equidistant_frame_takes_lowest_index() {
        let mut tape = Tape::<f64>::new();
        let cb = tape.leaf(2, 2, vec![0.0, 0.0, 1.0, 1.0], false);
        let h = tape.leaf(1, 2, vec![0.5, 0.5], false);
        let vq = quantize(&mut tape, h, cb);
        assert_eq!(vq.indices, vec![0]);
    }

    /// Brute-force nearest-neighbor oracle over random inputs, including
    /// the tie-break, written as an independent double loop.
    #[test]
    fn quantize_matches_bruteforce_oracle() {
        use rand::SeedableRng;
        for seed in 0..100u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (t, k, dz) = (12, 16, 4);
            let hd: Vec<f64> = (0..t * dz).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cd: Vec<f64> = (0..k * dz).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::<f64>::new();
            let cb = tape.leaf(k, dz, cd.clone(), false);
            let h = tape.leaf(t, dz, hd.clone(), false);
            let vq = quantize(&mut tape, h, cb);
            for ti in 0..t {
                let mut best = usize::MAX;
                let mut best_dist = f64::INFINITY;
                for j in (0..k).rev() {
                    let dist: f64 = (0..dz)
                        .map(|d| (hd[ti * dz + d] - cd[j * dz + d]).powi(2))
                        .sum();
                    if dist <= best_dist {
                        // reverse scan with <= lands on the lowest index
                        best_dist = dist;
                        best = j;
                    }
                }
                assert_eq!(vq.indices[ti], best, "seed {seed} frame {ti}");
            }
        }
    }

    /// Straight-through: gradient of a reconstruction-style loss w.r.t. h
    /// equals the gradient w.r.t. q exactly.
    #[test]
    fn straight_through_gradient_is_identity() {
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (t, k, dz) = (5, 4, 3);
        let hd: Vec<f64> = (0..t * dz).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cd: Vec<f64> = (0..k * dz).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // loss = mean(q_st^2), gradient through the straight-through path
        let mut tape = Tape::<f64>::new();
        let cb = tape.leaf(k, dz, cd.clone(), true);
        let h = tape.leaf(t, dz, hd.clone(), true);
        let vq = quantize(&mut tape, h, cb);
        let sq = tape.square(vq.quantized_st);
        let loss = tape.mean(sq);
        tape.backward(loss);
        let grad_h = tape.grad(h).to_vec();
        let q_data = tape.data(vq.quantized_st).to_vec();
        // the codebook receives nothing from the reconstruction path
        assert!(tape.grad(cb).iter().all(|&g| g == 0.0));

        // oracle: the identical loss evaluated with q as the leaf variable
        let mut oracle = Tape::<f64>::new();
        let q = oracle.leaf(t, dz, q_data, true);
        let sq = oracle.square(q);
        let loss = oracle.mean(sq);
        oracle.backward(loss);
        for (g, e) in grad_h.iter().zip(oracle.grad(q)) {
            assert_eq!(*g, *e, "straight-through gradient must copy exactly");
        }
    }

    /// The straight-through gradient only depends on the selected entries;
    /// enlarging the codebook with far-away entries changes nothing.
    #[test]
    fn straight_through_invariant_to_codebook_size() {
        let hd = vec![0.30, 0.20, -0.10, 0.40];
        let near = vec![0.25, 0.25, -0.15, 0.35];
        let run = |codebook: Vec<f64>, k: usize| {
            let mut tape = Tape::<f64>::new();
            let cb = tape.leaf(k, 2, codebook, true);
            let h = tape.leaf(2, 2, hd.clone(), true);
            let vq = quantize(&mut tape, h, cb);
            let sq = tape.square(vq.quantized_st);
            let loss = tape.mean(sq);
            tape.backward(loss);
            (vq.indices.clone(), tape.grad(h).to_vec())
        };
        let (idx_small, grad_small) = run(near.clone(), 2);
        let mut big = near.clone();
        for j in 0..62 {
            big.push(50.0 + j as f64);
            big.push(-50.0 - j as f64);
        }
        let (idx_big, grad_big) = run(big, 64);
        assert_eq!(idx_small, idx_big);
        assert_eq!(grad_small, grad_big);
    }

    /// Codebook entries receive gradient only via the codebook term:
    /// finite differences over entries with the other terms isolated.
    #[test]
    fn codebook_gradient_comes_from_codebook_term_only() {
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (t, k, dz) = (4, 3, 2);
        let hd: Vec<f64> = (0..t * dz).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cd: Vec<f64> = (0..k * dz).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::<f64>::new();
        let cb = tape.leaf(k, dz, cd.clone(), true);
        let h = tape.leaf(t, dz, hd.clone(), true);
        let vq = quantize(&mut tape, h, cb);
        // full Eq.-(2)-style loss
        let sq = tape.square(vq.quantized_st);
        let recon = tape.mean(sq);
        let beta_commit = tape.scale(vq.commitment_loss, 0.25);
        let partial = tape.add(recon, vq.codebook_loss);
        let loss = tape.add(partial, beta_commit);
        tape.backward(loss);
        let grad_cb = tape.grad(cb).to_vec();

        // finite differences of the codebook term alone: indices pinned
        let indices = vq.indices.clone();
        let eval_cb_term = |cd: &[f64]| -> f64 {
            let mut acc = 0.0;
            for (ti, &j) in indices.iter().enumerate() {
                for d in 0..dz {
                    acc += (hd[ti * dz + d] - cd[j * dz + d]).powi(2);
                }
            }
            acc / t as f64
        };
        let eps = 1e-6;
        let mut probe = cd.clone();
        for i in 0..probe.len() {
            let orig = probe[i];
            probe[i] = orig + eps;
            let hi = eval_cb_term(&probe);
            probe[i] = orig - eps;
            let lo = eval_cb_term(&probe);
            probe[i] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            assert!((grad_cb[i] - fd).abs() <= 1e-6, "entry {i}: {} vs {fd}", grad_cb[i]);
        }
    }

    #[test]
    fn hierarchical_output_shapes() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 7);
        let mut tape = Tape::<f32>::new();
        let binding = TapeBinding::bind(&mut tape, &model.params, false);
        let t = 10;
        let x = tape.leaf(t, cfg.feat_dim, vec![0.1; t * cfg.feat_dim], false);
        let aux = model.aux_matrix(&mut tape, &binding, "dec/spk_embed", &aux_for(t, 1));
        let out = model.forward_hierarchical(&mut tape, &binding, x, aux);
        assert_eq!((out.x_hat.rows, out.x_hat.cols), (t, cfg.feat_dim));
        for vq in &out.vq {
            assert_eq!(vq.indices.len(), t);
        }
        for h in &out.h {
            assert_eq!((h.rows, h.cols), (t, cfg.latent_dim));
        }
        assert_eq!(out.q_cat.cols, 3 * cfg.latent_dim);
    }

    #[test]
    fn checkpoint_roundtrip_restores_parameters() {
        let dir = std::env::temp_dir().join(format!("vqvc-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.crkp");
        let model = Model::init(tiny_cfg(), 42);
        model.save(&path, &[]).unwrap();
        let (loaded, extra) = Model::load(tiny_cfg(), &path).unwrap();
        assert!(extra.is_empty());
        assert_eq!(loaded.params, model.params);
    }

    fn synthetic_stats(dim: usize, shift: f64) -> SpeakerStats {
        SpeakerStats {
            speaker_index: 0,
            lcf0_mean: 5.0 + shift,
            lcf0_std: 0.2,
            feat_mean: (0..dim).map(|d| d as f64 * 0.01 + shift).collect(),
            feat_std: vec![1.0; dim],
        }
    }

    #[test]
    fn conversion_indices_ignore_target_speaker() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 3);
        let t = 12;
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let data = Array2::from_shape_fn((t, cfg.feat_dim), |_| rng.gen_range(-1.0f32..1.0));
        let feats = FeatureSeq::new(data, FeatureKind::MelFilterbank);
        let f0 = F0Contour {
            f0_hz: (0..t).map(|i| if i % 4 == 0 { 0.0 } else { 150.0 }).collect(),
            voiced: (0..t).map(|i| i % 4 != 0).collect(),
        };
        let src = synthetic_stats(cfg.feat_dim, 0.0);
        let tgt = synthetic_stats(cfg.feat_dim, 0.5);
        let to_self = convert(&model, &feats, &f0, &src, &src, 0).unwrap();
        let to_other = convert(&model, &feats, &f0, &src, &tgt, 2).unwrap();
        assert_eq!(to_self.indices, to_other.indices);
    }

    #[test]
    fn self_conversion_is_reconstruction() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 3);
        let t = 9;
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let data = Array2::from_shape_fn((t, cfg.feat_dim), |_| rng.gen_range(-1.0f32..1.0));
        let feats = FeatureSeq::new(data, FeatureKind::MelFilterbank);
        let f0 = F0Contour { f0_hz: vec![140.0; t], voiced: vec![true; t] };
        let src = synthetic_stats(cfg.feat_dim, 0.0);
        let a = convert(&model, &feats, &f0, &src, &src, 0).unwrap();
        let b = convert(&model, &feats, &f0, &src, &src, 0).unwrap();
        assert_eq!(a.features.data, b.features.data, "conversion must be deterministic");
    }

    #[test]
    fn unknown_speaker_rejected() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 3);
        let feats = FeatureSeq::new(Array2::zeros((4, cfg.feat_dim)), FeatureKind::MelFilterbank);
        let f0 = F0Contour { f0_hz: vec![100.0; 4], voiced: vec![true; 4] };
        let s = synthetic_stats(cfg.feat_dim, 0.0);
        assert!(convert(&model, &feats, &f0, &s, &s, 99).is_err());
    }
}
