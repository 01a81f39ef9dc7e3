//! Trainable layers built on the tape.
//!
//! Layers do not own tensors. Their weights live in a [`ParamStore`] and the
//! layer keeps [`ParamId`] handles; a forward pass first binds the store onto
//! a tape ([`ParamStore::bind`]) and layers look their weights up in the
//! resulting [`Bound`] set.

mod attention;
mod encoder;
mod linear;
mod norm;

pub use attention::MultiHeadAttention;
pub use encoder::{EncoderBlock, FeedForward, PositionalEmbedding};
pub use linear::Linear;
pub use norm::BatchNorm;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// False for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Named tensors of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Places every entry on `tape`: trainable tensors as differentiable
    /// leaves, buffers as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.var(e.value.clone(), e.trainable))
            .collect();
        Bound { vars }
    }

    /// Replaces this store's values with those of `other`, which must hold
    /// the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, value) in updates {
            self.entries[id.0].value = value;
        }
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradient of every entry, aligned with the store; buffers get `None`.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

/// Per-pass state: train/eval switch, dropout randomness, and batch-norm
/// running-statistic updates collected during a training pass.
pub struct ForwardCtx {
    training: bool,
    rng: ChaCha8Rng,
    updates: Vec<(ParamId, Tensor)>,
}

impl ForwardCtx {
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng,
            updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub(crate) fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }

    /// Hands the dropout generator back, e.g. to carry it across batches.
    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng
    }
}

/// Inverted dropout: survivors are scaled by `1/(1−p)` so the expectation is
/// unchanged; identity outside training or when `p == 0`.
pub fn dropout<'t>(x: Var<'t>, p: f64, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config("dropout", format!("probability {p} outside [0, 1)")));
    }
    if !ctx.training || p == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if ctx.rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = x.tape().constant(Tensor::new(&shape, mask)?);
    Ok(x.mul(mask)?)
}

pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

pub(crate) fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_identity_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 4], 3.0));
        let mut train = ForwardCtx::training(ChaCha8Rng::seed_from_u64(1));
        assert_eq!(dropout(x, 0.0, &mut train).unwrap().id(), x.id());
        let mut eval = ForwardCtx::eval();
        assert_eq!(dropout(x, 0.9, &mut eval).unwrap().id(), x.id());
        assert!(matches!(dropout(x, 1.0, &mut train), Err(Error::Config { .. })));
    }

    #[test]
    fn dropout_zero_fraction_is_close_to_p() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[200, 100]));
        let mut ctx = ForwardCtx::training(ChaCha8Rng::seed_from_u64(5));
        let y = dropout(x, 0.5, &mut ctx).unwrap().value();
        let zeros = y.data().iter().filter(|v| **v == 0.0).count() as f64 / y.numel() as f64;
        assert!((zeros - 0.5).abs() < 0.02, "zero fraction {zeros}");
        assert!(y.data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn store_bind_marks_buffers_constant() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::ones(&[2]), true);
        let b = store.add("running", Tensor::ones(&[2]), false);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        assert!(bound.get(w).requires_grad());
        assert!(!bound.get(b).requires_grad());
        assert_eq!(store.count_trainable(""), 2);
    }
}
