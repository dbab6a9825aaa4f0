//! Parameter storage, initialization, and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::Grads;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, named parameter table. Names are unique and stable, which makes
/// checkpoints and parameter hashes order-independent of construction details.
pub struct ParamStore {
    names: Vec<String>,
    vals: Vec<Array2<f64>>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            vals: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, val: Array2<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.vals.push(val);
        self.trainable.push(trainable);
        ParamId(self.vals.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, p: ParamId) -> &Array2<f64> {
        &self.vals[p.0]
    }

    pub fn value_mut(&mut self, p: ParamId) -> &mut Array2<f64> {
        &mut self.vals[p.0]
    }

    pub fn name(&self, p: ParamId) -> &str {
        &self.names[p.0]
    }

    pub fn is_trainable(&self, p: ParamId) -> bool {
        self.trainable[p.0]
    }

    pub fn set_trainable(&mut self, p: ParamId, trainable: bool) {
        self.trainable[p.0] = trainable;
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for i in 0..self.names.len() {
            if self.names[i].starts_with(prefix) {
                self.trainable[i] = false;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        (0..self.vals.len()).map(|i| (ParamId(i), self.names[i].as_str(), &self.vals[i]))
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// FNV-1a hash of the raw bytes of a parameter subset, in name order.
    /// Used by tests to assert that frozen parameters never move.
    pub fn hash_prefix(&self, prefix: &str) -> u64 {
        let mut idx: Vec<usize> = (0..self.names.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .collect();
        idx.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        let mut h: u64 = 0xcbf29ce484222325;
        for i in idx {
            for &v in self.vals[i].iter() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Xavier-uniform initialization.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

/// Small-scale normal initialization (embeddings, codebooks).
pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Adam with bias correction; no weight decay.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
            t: 0,
        }
    }

    /// One update over all trainable parameters with gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter() {
            let p = ParamId(i);
            if !store.is_trainable(p) {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let val = store.value_mut(p);
            for ((x, &m), &v) in val.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
