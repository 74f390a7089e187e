//! Adam with bias correction over a named parameter store.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::params::{ParamStore, Tensor};

/// Optimizer state: per-parameter first/second moments plus a step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter named in `grads`. Aborts on a
    /// non-finite gradient, naming the parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        for (name, grad) in grads {
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient for parameter {name} at element {i}"
                )));
            }
            let tensor = params.get_mut(name);
            assert_eq!(tensor.numel(), grad.len(), "gradient size mismatch for {name}");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, &g), (mi, vi)) in tensor.data.iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi as f64 / bc1;
                let v_hat = *vi as f64 / bc2;
                *p -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }

    /// Moment buffers and step counter as named tensors for checkpointing,
    /// under `optim/<tag>/`.
    pub fn state_tensors(&self, tag: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("optim/{tag}/step"), Tensor::scalar(self.step as f32))];
        for (name, m) in &self.m {
            out.push((format!("optim/{tag}/m/{name}"), Tensor::new(vec![m.len()], m.clone())));
        }
        for (name, v) in &self.v {
            out.push((format!("optim/{tag}/v/{name}"), Tensor::new(vec![v.len()], v.clone())));
        }
        out
    }

    /// Restore moments and step counter from checkpoint tensors.
    pub fn restore(&mut self, tag: &str, tensors: &BTreeMap<String, Tensor>) {
        let prefix_m = format!("optim/{tag}/m/");
        let prefix_v = format!("optim/{tag}/v/");
        if let Some(step) = tensors.get(&format!("optim/{tag}/step")) {
            self.step = step.data[0] as u64;
        }
        for (name, tensor) in tensors {
            if let Some(param) = name.strip_prefix(&prefix_m) {
                self.m.insert(param.to_string(), tensor.data.clone());
            } else if let Some(param) = name.strip_prefix(&prefix_v) {
                self.v.insert(param.to_string(), tensor.data.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, data: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = data.len();
        s.insert(name, Tensor::new(vec![n], data));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        let mut params = store_with("w", vec![1.5, -0.5]);
        let mut adam = Adam::new(0.1);
        let grads = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").data, vec![1.5, -0.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = store_with("w", vec![2.0]);
        let mut adam = Adam::new(0.1);
        let grads = BTreeMap::from([("w".to_string(), vec![1.0])]);
        adam.step(&mut params, &grads).unwrap();
        // bias-corrected m_hat / sqrt(v_hat) = 1 at t=1
        let moved = 2.0 - params.get("w").data[0];
        assert!((moved - 0.1).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn converges_on_quadratic() {
        let mut params = store_with("w", vec![0.0]);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let w = params.get("w").data[0];
            let grads = BTreeMap::from([("w".to_string(), vec![2.0 * (w - 3.0)])]);
            adam.step(&mut params, &grads).unwrap();
        }
        let w = params.get("w").data[0];
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = store_with("enc/w", vec![1.0]);
        let mut adam = Adam::new(0.1);
        let grads = BTreeMap::from([("enc/w".to_string(), vec![f32::NAN])]);
        let err = adam.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("enc/w"), "{err}");
    }

    #[test]
    fn state_roundtrip() {
        let mut params = store_with("w", vec![1.0]);
        let mut adam = Adam::new(0.1);
        let grads = BTreeMap::from([("w".to_string(), vec![0.5])]);
        adam.step(&mut params, &grads).unwrap();
        let tensors: BTreeMap<String, Tensor> = adam.state_tensors("g").into_iter().collect();
        let mut restored = Adam::new(0.1);
        restored.restore("g", &tensors);
        assert_eq!(restored.step, adam.step);
        assert_eq!(restored.m, adam.m);
        assert_eq!(restored.v, adam.v);
    }
}
