//! Named parameter storage and per-step tape binding.
//!
//! Parameters persist across steps as f32 tensors keyed by hierarchical
//! names ("enc/bottom/layer0/conv_w", ...). Each training step copies them
//! onto a fresh tape as leaves; after backward the gradients are read back
//! out by name.

use std::collections::BTreeMap;

use super::{Scalar, Tape, Value};

/// A dense named tensor. Rank can exceed 2; on the tape it is viewed as a
/// matrix with the last dimension as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view used on the tape: the last dimension is columns,
    /// everything before it is flattened into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }
}

/// Ordered map of named parameters. Iteration order (lexicographic by name)
/// is the binding and checkpoint order, which keeps runs deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), tensor).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore { entries: iter.into_iter().collect() }
    }
}

/// Parameter values bound onto one tape for one forward/backward pass.
pub struct TapeBinding {
    ids: BTreeMap<String, Value>,
}

impl TapeBinding {
    /// Copy every parameter onto the tape as a leaf. `trainable` controls
    /// whether gradients are recorded for them.
    pub fn bind<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore, trainable: bool) -> Self {
        let mut ids = BTreeMap::new();
        for (name, tensor) in store.iter() {
            let (rows, cols) = tensor.matrix_dims();
            let data: Vec<S> = tensor.data.iter().map(|&v| S::cast_from(v as f64)).collect();
            let value = tape.leaf(rows, cols, data, trainable);
            ids.insert(name.clone(), value);
        }
        TapeBinding { ids }
    }

    pub fn value(&self, name: &str) -> Value {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound on this tape"))
    }

    /// Gradients (as f32) of every bound parameter whose name passes the
    /// filter.
    pub fn grads<S: Scalar>(&self, tape: &Tape<S>, filter: impl Fn(&str) -> bool) -> BTreeMap<String, Vec<f32>> {
        self.ids
            .iter()
            .filter(|(name, _)| filter(name))
            .map(|(name, &v)| {
                let g: Vec<f32> = tape.grad(v).iter().map(|&x| x.cast_f64() as f32).collect();
                (name.clone(), g)
            })
            .collect()
    }
}
