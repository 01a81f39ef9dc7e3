use rand_chacha::ChaCha8Rng;

use super::{dropout, normal_init, BatchNorm, Bound, ForwardCtx, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::mask::AttnMask;
use crate::tensor::Var;

/// `linear(d → factor·d) → relu → linear(factor·d → d)`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, factor: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = factor * d_model as f64;
        if hidden < 1.0 || hidden.fract() != 0.0 {
            return Err(Error::config(
                "ff_factor",
                format!("{factor} × d_model {d_model} is not a positive integer width"),
            ));
        }
        let hidden = hidden as usize;
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), d_model, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, d_model, rng),
        })
    }

    pub fn hidden(&self) -> usize {
        self.inner.d_out()
    }

    pub fn param_count(&self) -> usize {
        self.inner.param_count() + self.outer.param_count()
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.inner.forward(params, x)?.relu();
        self.outer.forward(params, h)
    }
}

/// Learnable additive position table, one row per token slot.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    rows: usize,
    d_model: usize,
}

impl PositionalEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = store.add(name, normal_init(rng, &[rows, d_model], 0.02), true);
        Self { table, rows, d_model }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn param_count(&self) -> usize {
        self.rows * self.d_model
    }

    /// Adds the table to `tokens: [S, rows, d_model]`.
    pub fn forward<'t>(&self, params: &Bound<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let shape = tokens.shape();
        if shape.len() != 3 || shape[1] != self.rows {
            return Err(Error::config(
                "positions",
                format!("position table has {} rows but the sequence is {:?}", self.rows, shape),
            ));
        }
        Ok(tokens.add(params.get(self.table))?)
    }
}

/// One encoder block in post-norm layout with batch normalization:
/// `x → MHA → dropout → +x → BN → FFN → dropout → + → BN`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm_attn: BatchNorm,
    pub ff: FeedForward,
    pub norm_ff: BatchNorm,
    dropout: f64,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_factor: f64,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            norm_attn: BatchNorm::new(store, &format!("{name}.norm_attn"), d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, ff_factor, rng)?,
            norm_ff: BatchNorm::new(store, &format!("{name}.norm_ff"), d_model),
            dropout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.attn.param_count() + self.norm_attn.param_count() + self.ff.param_count() + self.norm_ff.param_count()
    }

    /// `x: [S, T, d_model]`, `mask: T×T`.
    pub fn forward<'t>(
        &self,
        params: &Bound<'t>,
        x: Var<'t>,
        mask: &AttnMask,
        ctx: &mut ForwardCtx,
    ) -> Result<Var<'t>> {
        let a = self.attn.forward(params, x, Some(mask))?;
        let x = x.add(dropout(a, self.dropout, ctx)?)?;
        let x = self.norm_attn.forward(params, x, ctx)?;
        let f = self.ff.forward(params, x)?;
        let x = x.add(dropout(f, self.dropout, ctx)?)?;
        self.norm_ff.forward(params, x, ctx)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn hidden_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ff = FeedForward::new(&mut store, "ff", 8, 2.0, &mut rng).unwrap();
        assert_eq!(ff.hidden(), 16);
        assert_eq!(ff.param_count(), 8 * 16 + 16 + 16 * 8 + 8);
        assert!(FeedForward::new(&mut store, "bad", 3, 0.5, &mut rng).is_err());
    }

    #[test]
    fn zero_inner_weights_give_outer_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ff = FeedForward::new(&mut store, "ff", 2, 2.0, &mut rng).unwrap();
        *store.get_mut(ff.inner.weight) = Tensor::zeros(&[2, 4]);
        *store.get_mut(ff.outer.bias) = Tensor::vector(vec![0.25, -1.0]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = ff.forward(&p, tape.constant(Tensor::full(&[3, 2], 5.0))).unwrap();
        assert_eq!(y.value().data(), [0.25, -1.0].repeat(3).as_slice());
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ff = FeedForward::new(&mut store, "ff", 1, 1.0, &mut rng).unwrap();
        *store.get_mut(ff.inner.weight) = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        *store.get_mut(ff.inner.bias) = Tensor::vector(vec![-10.0]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.leaf(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let y = ff.forward(&p, x).unwrap().sum_all();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0]);
        assert_eq!(g.wrt(p.get(ff.inner.weight)).data(), &[0.0]);
    }

    #[test]
    fn position_rows_must_match() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos = PositionalEmbedding::new(&mut store, "pos", 3, 2, &mut rng);
        assert_eq!(pos.param_count(), 6);
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert!(pos.forward(&p, tape.constant(Tensor::zeros(&[1, 4, 2]))).is_err());
        assert!(pos.forward(&p, tape.constant(Tensor::zeros(&[5, 3, 2]))).is_ok());
    }
}
