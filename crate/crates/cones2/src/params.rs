//! Named parameter collections shared by the encoder and the denoiser.
//!
//! Parameters live in an insertion-ordered map so that optimizer sweeps,
//! checksums and serialization are all deterministic.

use crate::autodiff::{Graph, NodeId};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: IndexMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.entries.insert(name.to_string(), t).is_none(),
            "duplicate parameter {name}"
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn bits_eq(&self, other: &Params) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(k, v)| {
                other.entries.get(k).map(|o| v.bits_eq(o)).unwrap_or(false)
            })
    }

    /// SHA-256 over names, shapes and little-endian payloads.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.le_bytes());
        }
        hex_string(&h.finalize())
    }

    /// Test helper: refill every tensor with gaussian noise.
    pub fn randomize<R: Rng>(&mut self, std: f64, rng: &mut R) {
        for (_, t) in self.entries.iter_mut() {
            *t = Tensor::randn(t.shape(), std, rng);
        }
    }

    pub fn zero_all(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Accumulated gradients keyed like [`Params`].
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    pub entries: IndexMap<String, Tensor>,
}

impl GradMap {
    pub fn add_scaled(&mut self, other: &GradMap, k: f64) {
        for (name, g) in &other.entries {
            match self.entries.get_mut(name) {
                Some(acc) => acc.axpy_in_place(k, g),
                None => {
                    let mut t = g.clone();
                    t.scale_in_place(k);
                    self.entries.insert(name.clone(), t);
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, g) in self.entries.iter_mut() {
            g.scale_in_place(k);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }
}

/// Lazily mirrors parameters into a graph as leaves and remembers the
/// mapping so gradients can be read back by name.
pub struct ParamNodes {
    trainable: bool,
    ids: IndexMap<String, NodeId>,
}

impl ParamNodes {
    pub fn new(trainable: bool) -> Self {
        ParamNodes { trainable, ids: IndexMap::new() }
    }

    pub fn node(&mut self, g: &mut Graph, params: &Params, name: &str) -> NodeId {
        if let Some(id) = self.ids.get(name) {
            return *id;
        }
        let id = g.leaf(params.get(name).clone(), self.trainable);
        self.ids.insert(name.to_string(), id);
        id
    }

    /// Gradients for every parameter touched by the forward pass.
    /// Untouched or gradient-free parameters get zeros.
    pub fn grads(&self, g: &Graph, params: &Params) -> GradMap {
        let mut out = GradMap::default();
        for (name, t) in params.iter() {
            let grad = self
                .ids
                .get(name)
                .and_then(|id| g.grad(*id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.entries.insert(name.clone(), grad);
        }
        out
    }
}
