//! Dilated-convolution gated blocks and the discriminator /
//! speaker-classifier networks.
//!
//! Every block is length-preserving: no time down- or up-sampling anywhere.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autograd::{ParamStore, Scalar, Tape, TapeBinding, Tensor, Value};

/// Shape of one gated convolution stack.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct WaveNetBlockConfig {
    pub layers_per_stack: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub causal: bool,
}

impl Default for WaveNetBlockConfig {
    fn default() -> Self {
        WaveNetBlockConfig { layers_per_stack: 4, channels: 32, kernel_size: 3, causal: true }
    }
}

impl WaveNetBlockConfig {
    /// Dilation doubles per layer: 1, 2, 4, ...
    pub fn dilation(&self, layer: usize) -> usize {
        1 << layer
    }
}

fn uniform(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale) as f32).collect()
}

fn register_linear(store: &mut ParamStore, rng: &mut ChaCha20Rng, name_w: String, name_b: Option<String>, fan_in: usize, fan_out: usize) {
    let scale = (1.0 / fan_in as f64).sqrt();
    store.insert(name_w, Tensor::new(vec![fan_in, fan_out], uniform(rng, fan_in * fan_out, scale)));
    if let Some(name_b) = name_b {
        store.insert(name_b, Tensor::zeros(vec![fan_out]));
    }
}

/// One stack of gated dilated convolutions with residual and skip paths:
/// input 1x1 projection, then per layer dilated conv -> (optional) aux
/// injection -> GLU -> residual add and skip accumulate.
#[derive(Debug, Clone)]
pub struct WaveNetStack {
    pub prefix: String,
    pub in_channels: usize,
    pub aux_channels: Option<usize>,
    pub cfg: WaveNetBlockConfig,
}

impl WaveNetStack {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        in_channels: usize,
        aux_channels: Option<usize>,
        cfg: &WaveNetBlockConfig,
    ) -> Self {
        let c = cfg.channels;
        let k = cfg.kernel_size;
        register_linear(store, rng, format!("{prefix}/in_w"), Some(format!("{prefix}/in_b")), in_channels, c);
        for i in 0..cfg.layers_per_stack {
            let scale = (1.0 / (k * c) as f64).sqrt();
            store.insert(
                format!("{prefix}/layer{i}/conv_w"),
                Tensor::new(vec![k, c, 2 * c], uniform(rng, k * c * 2 * c, scale)),
            );
            store.insert(format!("{prefix}/layer{i}/conv_b"), Tensor::zeros(vec![2 * c]));
            if let Some(a) = aux_channels {
                let scale = (1.0 / a as f64).sqrt();
                store.insert(format!("{prefix}/layer{i}/aux_w"), Tensor::new(vec![a, 2 * c], uniform(rng, a * 2 * c, scale)));
            }
            register_linear(store, rng, format!("{prefix}/layer{i}/res_w"), Some(format!("{prefix}/layer{i}/res_b")), c, c);
            register_linear(store, rng, format!("{prefix}/layer{i}/skip_w"), Some(format!("{prefix}/layer{i}/skip_b")), c, c);
        }
        WaveNetStack { prefix: prefix.to_string(), in_channels, aux_channels, cfg: cfg.clone() }
    }

    /// Returns (final residual stream, skip sum), both T x channels.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &TapeBinding,
        input: Value,
        aux: Option<Value>,
    ) -> (Value, Value) {
        assert_eq!(
            input.cols, self.in_channels,
            "{}: input has {} channels, expected {}",
            self.prefix, input.cols, self.in_channels
        );
        if let Some(aux) = aux {
            assert_eq!(
                aux.rows, input.rows,
                "{}: aux length {} does not match input length {}",
                self.prefix, aux.rows, input.rows
            );
        }
        let p = &self.prefix;
        let in_w = binding.value(&format!("{p}/in_w"));
        let in_b = binding.value(&format!("{p}/in_b"));
        let proj = tape.matmul(input, in_w);
        let mut x = tape.add_row(proj, in_b);
        let mut skip_sum: Option<Value> = None;
        for i in 0..self.cfg.layers_per_stack {
            let conv_w = binding.value(&format!("{p}/layer{i}/conv_w"));
            let conv_b = binding.value(&format!("{p}/layer{i}/conv_b"));
            let z = tape.conv1d_dilated(x, conv_w, self.cfg.kernel_size, self.cfg.dilation(i), self.cfg.causal);
            let mut z = tape.add_row(z, conv_b);
            if let Some(aux) = aux {
                let aux_w = binding.value(&format!("{p}/layer{i}/aux_w"));
                let inj = tape.matmul(aux, aux_w);
                z = tape.add(z, inj);
            }
            let g = tape.glu(z);
            let res_w = binding.value(&format!("{p}/layer{i}/res_w"));
            let res_b = binding.value(&format!("{p}/layer{i}/res_b"));
            let res = tape.matmul(g, res_w);
            let res = tape.add_row(res, res_b);
            x = tape.add(x, res);
            let skip_w = binding.value(&format!("{p}/layer{i}/skip_w"));
            let skip_b = binding.value(&format!("{p}/layer{i}/skip_b"));
            let s = tape.matmul(g, skip_w);
            let s = tape.add_row(s, skip_b);
            skip_sum = Some(match skip_sum {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        (x, skip_sum.expect("at least one layer"))
    }

    pub fn param_count(&self) -> usize {
        let c = self.cfg.channels;
        let k = self.cfg.kernel_size;
        let mut n = self.in_channels * c + c;
        let per_layer = k * c * 2 * c + 2 * c // dilated conv
            + self.aux_channels.map_or(0, |a| a * 2 * c)
            + (c * c + c) * 2; // residual and skip 1x1
        n += per_layer * self.cfg.layers_per_stack;
        n
    }

    /// Frames of context visible to one output frame.
    pub fn receptive_field(&self) -> usize {
        let spread: usize = (0..self.cfg.layers_per_stack)
            .map(|i| (self.cfg.kernel_size - 1) * self.cfg.dilation(i))
            .sum();
        1 + if self.cfg.causal { spread } else { spread }
    }
}

/// A stack plus a two-layer relu head over the skip sum; the standard
/// encoder/decoder building block.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub stack: WaveNetStack,
    pub out_channels: usize,
}

impl FeatureNet {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        in_channels: usize,
        aux_channels: Option<usize>,
        out_channels: usize,
        cfg: &WaveNetBlockConfig,
    ) -> Self {
        let stack = WaveNetStack::register(store, rng, prefix, in_channels, aux_channels, cfg);
        let c = cfg.channels;
        register_linear(store, rng, format!("{prefix}/head/w1"), Some(format!("{prefix}/head/b1")), c, c);
        register_linear(store, rng, format!("{prefix}/head/w2"), Some(format!("{prefix}/head/b2")), c, out_channels);
        FeatureNet { stack, out_channels }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &TapeBinding,
        input: Value,
        aux: Option<Value>,
    ) -> Value {
        let p = &self.stack.prefix;
        let (_, skip) = self.stack.forward(tape, binding, input, aux);
        let a = tape.relu(skip);
        let w1 = binding.value(&format!("{p}/head/w1"));
        let b1 = binding.value(&format!("{p}/head/b1"));
        let h = tape.matmul(a, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let w2 = binding.value(&format!("{p}/head/w2"));
        let b2 = binding.value(&format!("{p}/head/b2"));
        let out = tape.matmul(h, w2);
        tape.add_row(out, b2)
    }

    pub fn param_count(&self) -> usize {
        let c = self.stack.cfg.channels;
        self.stack.param_count() + (c * c + c) + (c * self.out_channels + self.out_channels)
    }
}

/// WaveNet-like conditional discriminator: per-frame realness scores (raw,
/// no squashing; the least-squares objective operates on them directly) and
/// utterance-level speaker logits from temporal mean pooling.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub stack: WaveNetStack,
    pub n_speakers: usize,
}

impl Discriminator {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        in_channels: usize,
        aux_channels: Option<usize>,
        n_speakers: usize,
        cfg: &WaveNetBlockConfig,
    ) -> Self {
        let stack = WaveNetStack::register(store, rng, prefix, in_channels, aux_channels, cfg);
        let c = cfg.channels;
        register_linear(store, rng, format!("{prefix}/head/w1"), Some(format!("{prefix}/head/b1")), c, c);
        register_linear(store, rng, format!("{prefix}/real_w"), Some(format!("{prefix}/real_b")), c, 1);
        register_linear(store, rng, format!("{prefix}/spk_w"), Some(format!("{prefix}/spk_b")), c, n_speakers);
        Discriminator { stack, n_speakers }
    }

    /// Returns (realness T x 1, speaker logits 1 x S).
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &TapeBinding,
        x: Value,
        aux: Option<Value>,
    ) -> (Value, Value) {
        let p = &self.stack.prefix;
        let (_, skip) = self.stack.forward(tape, binding, x, aux);
        let a = tape.relu(skip);
        let w1 = binding.value(&format!("{p}/head/w1"));
        let b1 = binding.value(&format!("{p}/head/b1"));
        let f = tape.matmul(a, w1);
        let f = tape.add_row(f, b1);
        let f = tape.relu(f);
        let real_w = binding.value(&format!("{p}/real_w"));
        let real_b = binding.value(&format!("{p}/real_b"));
        let realness = tape.matmul(f, real_w);
        let realness = tape.add_row(realness, real_b);
        let pooled = tape.mean_rows(f);
        let spk_w = binding.value(&format!("{p}/spk_w"));
        let spk_b = binding.value(&format!("{p}/spk_b"));
        let logits = tape.matmul(pooled, spk_w);
        let logits = tape.add_row(logits, spk_b);
        (realness, logits)
    }

    pub fn param_count(&self) -> usize {
        let c = self.stack.cfg.channels;
        self.stack.param_count() + (c * c + c) + (c + 1) + (c * self.n_speakers + self.n_speakers)
    }
}

/// Speaker classifier over pre-quantization latents, fed through a gradient
/// reversal layer. Shares the discriminator architecture (stack, pooled
/// affine head) with its own parameters.
#[derive(Debug, Clone)]
pub struct SpeakerClassifier {
    pub stack: WaveNetStack,
    pub n_speakers: usize,
}

impl SpeakerClassifier {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        in_channels: usize,
        n_speakers: usize,
        cfg: &WaveNetBlockConfig,
    ) -> Self {
        let stack = WaveNetStack::register(store, rng, prefix, in_channels, None, cfg);
        let c = cfg.channels;
        register_linear(store, rng, format!("{prefix}/head/w1"), Some(format!("{prefix}/head/b1")), c, c);
        register_linear(store, rng, format!("{prefix}/spk_w"), Some(format!("{prefix}/spk_b")), c, n_speakers);
        SpeakerClassifier { stack, n_speakers }
    }

    /// `logits = classifier(gradient_reversal(h, lambda))`, 1 x S.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &TapeBinding,
        h: Value,
        lambda: f64,
    ) -> Value {
        let p = &self.stack.prefix;
        let reversed = tape.gradient_reversal(h, lambda);
        let (_, skip) = self.stack.forward(tape, binding, reversed, None);
        let a = tape.relu(skip);
        let w1 = binding.value(&format!("{p}/head/w1"));
        let b1 = binding.value(&format!("{p}/head/b1"));
        let f = tape.matmul(a, w1);
        let f = tape.add_row(f, b1);
        let f = tape.relu(f);
        let pooled = tape.mean_rows(f);
        let spk_w = binding.value(&format!("{p}/spk_w"));
        let spk_b = binding.value(&format!("{p}/spk_b"));
        let logits = tape.matmul(pooled, spk_w);
        tape.add_row(logits, spk_b)
    }

    pub fn param_count(&self) -> usize {
        let c = self.stack.cfg.channels;
        self.stack.param_count() + (c * c + c) + (c * self.n_speakers + self.n_speakers)
    }
}
