use rand_chacha::ChaCha8Rng;

use super::{uniform_init, Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Affine map `x·W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    /// Weight uniform in ±1/√d_in, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[d_in, d_out], bound), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    /// Accepts any rank ≥ 1 whose last extent is `d_in`.
    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        match shape.last() {
            Some(&d) if d == self.d_in => {}
            _ => {
                return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: shape,
                    rhs: vec![self.d_in, self.d_out],
                }))
            }
        }
        let rows = shape.iter().product::<usize>() / self.d_in;
        let y = x
            .reshape(&[rows, self.d_in])?
            .matmul(params.get(self.weight))?
            .add(params.get(self.bias))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        Ok(y.reshape(&out_shape)?)
    }
}
