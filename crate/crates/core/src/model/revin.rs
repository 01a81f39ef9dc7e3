use crate::error::Result;
use crate::nn::{Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const REVIN_EPS: f64 = 1e-5;

/// Reversible instance normalization with a learnable per-channel affine.
///
/// Statistics are taken over the look-back axis of each sample and treated as
/// constants: gradients flow through the affine and the model, not through
/// the mean and standard deviation.
#[derive(Debug, Clone)]
pub struct RevIn {
    pub gamma: ParamId,
    pub beta: ParamId,
    channels: usize,
    eps: f64,
}

/// Per-sample, per-channel statistics of one normalized batch, `[B, 1, d]`.
#[derive(Debug, Clone)]
pub struct RevInState {
    pub mean: Tensor,
    pub std: Tensor,
}

impl RevIn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            channels,
            eps: REVIN_EPS,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    /// `x: [B, l, d]` → normalized `[B, l, d]` plus the statistics needed to
    /// undo it.
    pub fn normalize<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, RevInState)> {
        let tape = x.tape();
        let detached = tape.constant(x.value().as_ref().clone());
        let mean = detached.mean(1)?.value().as_ref().clone();
        let std = detached.var(1)?.add_scalar(self.eps).sqrt().value().as_ref().clone();
        let y = x
            .sub(tape.constant(mean.clone()))?
            .div(tape.constant(std.clone()))?
            .mul(params.get(self.gamma))?
            .add(params.get(self.beta))?;
        Ok((y, RevInState { mean, std }))
    }

    /// `y: [B, h, d]` in normalized units → original units.
    pub fn denormalize<'t>(&self, params: &Bound<'t>, y: Var<'t>, state: &RevInState) -> Result<Var<'t>> {
        let tape = y.tape();
        Ok(y.sub(params.get(self.beta))?
            .div(params.get(self.gamma))?
            .mul(tape.constant(state.std.clone()))?
            .add(tape.constant(state.mean.clone()))?)
    }
}
