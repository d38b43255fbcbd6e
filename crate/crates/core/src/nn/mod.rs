//! Differentiable building blocks.
//!
//! Everything is f64. A forward pass records ops on a [`Tape`]; calling
//! [`Tape::backward`] accumulates exact analytic gradients into the
//! [`ParamStore`]. There is no graph compiler: ops execute eagerly and the
//! tape is replayed in reverse. Networks own a `ParamStore` and build a
//! fresh tape per forward pass, so read-only inference can run concurrently
//! while training stays single-writer.

mod checkpoint;
mod checks;
mod gradcheck;
mod tape;

pub use checks::{primitive_checks, CheckReport};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_verbose, FD_EPSILON};
pub use tape::{NodeId, PadMode, Tape};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use rand::Rng;
use std::collections::BTreeMap;

/// Dense n-dimensional array with a gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor { dims, values: vec![0.0; n], grad: vec![0.0; n] }
    }

    pub fn from_values(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if values.len() != n {
            return Err(Error::Dimension(format!(
                "tensor data length {} does not match dims {:?}",
                values.len(),
                dims
            )));
        }
        let grad = vec![0.0; n];
        Ok(Tensor { dims, values, grad })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// A named tensor with its momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub momentum: Vec<f64>,
}

/// Index of a parameter within its [`ParamStore`].
pub type ParamId = usize;

/// Ordered collection of named parameters. Names are unique; iteration and
/// checkpoint order is insertion order, which keeps everything
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a parameter initialized with He-style fan-in uniform scaling,
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, drawn from a PRNG stream keyed
    /// by `(master_seed, name)` so initialization is independent of
    /// construction order.
    pub fn add_he(&mut self, name: &str, dims: Vec<usize>, fan_in: usize, master_seed: u64) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut stream = SeedStream::new(master_seed, &format!("init/{name}"));
        let n: usize = dims.iter().product();
        let values: Vec<f64> = (0..n).map(|_| (stream.rng().gen::<f64>() * 2.0 - 1.0) * bound).collect();
        self.add_values(name, dims, values)
    }

    /// Add a zero-initialized parameter (biases).
    pub fn add_zeros(&mut self, name: &str, dims: Vec<usize>) -> ParamId {
        let n: usize = dims.iter().product();
        self.add_values(name, dims, vec![0.0; n])
    }

    pub fn add_values(&mut self, name: &str, dims: Vec<usize>, values: Vec<f64>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let n = values.len();
        let id = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            tensor: Tensor { dims, values, grad: vec![0.0; n] },
            momentum: vec![0.0; n],
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Bitwise checksum over parameter values; used to assert freeze
    /// contracts during alternating training phases.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            h ^= crate::rng::fnv1a(p.name.as_bytes());
            h = h.wrapping_mul(0x100000001b3);
            for v in &p.tensor.values {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// SGD with classical momentum and multiplicative step decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate is multiplied by `decay_factor` every `decay_every`
    /// steps; `decay_every == 0` disables decay.
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 0.001, momentum: 0.9, decay_factor: 1.0, decay_every: 0 }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.decay_every == 0 {
            self.lr
        } else {
            self.lr * self.decay_factor.powi((step / self.decay_every) as i32)
        }
    }
}

/// One momentum-SGD update over every parameter in the store:
/// `v = momentum * v + grad; p -= lr(step) * v`.
pub fn sgd_step(store: &mut ParamStore, cfg: &OptimizerConfig, step: usize) {
    let lr = cfg.lr_at(step);
    for p in &mut store.params {
        for ((v, m), g) in p.tensor.values.iter_mut().zip(&mut p.momentum).zip(&p.tensor.grad) {
            *m = cfg.momentum * *m + g;
            *v -= lr * *m;
        }
    }
}
