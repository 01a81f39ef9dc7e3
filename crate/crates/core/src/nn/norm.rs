use super::{Bound, ForwardCtx, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over the last axis.
///
/// Training passes normalize each feature with the statistics of every
/// other position in the input (all leading axes flattened, i.e. batch ×
/// token) and record an exponential running average of them; evaluation
/// uses the running averages. Variances use the population convention.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    features: usize,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[features]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[features]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[features]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[features]), false),
            features,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.features
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.features) {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![self.features],
            }));
        }
        let rows = shape.iter().product::<usize>() / self.features;
        let flat = x.reshape(&[rows, self.features])?;
        let normalized = if ctx.is_training() {
            if rows < 2 {
                return Err(Error::Contract(
                    "batch norm in training mode needs at least two positions".into(),
                ));
            }
            let mean = flat.mean(0)?;
            let var = flat.var(0)?;
            let update = |running: &Tensor, batch: &Tensor| {
                let data = running
                    .data()
                    .iter()
                    .zip(batch.data())
                    .map(|(r, b)| (1.0 - self.momentum) * r + self.momentum * b)
                    .collect();
                Tensor::new(&[self.features], data).expect("feature vector")
            };
            let new_mean = update(params.get(self.running_mean).value().as_ref(), mean.value().as_ref());
            let new_var = update(params.get(self.running_var).value().as_ref(), var.value().as_ref());
            ctx.push_update(self.running_mean, new_mean);
            ctx.push_update(self.running_var, new_var);
            flat.sub(mean)?.div(var.add_scalar(self.eps).sqrt())?
        } else {
            let std = params.get(self.running_var).add_scalar(self.eps).sqrt();
            flat.sub(params.get(self.running_mean))?.div(std)?
        };
        let y = normalized.mul(params.get(self.gamma))?.add(params.get(self.beta))?;
        Ok(y.reshape(&shape)?)
    }
}
