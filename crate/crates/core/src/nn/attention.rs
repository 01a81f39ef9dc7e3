use rand_chacha::ChaCha8Rng;

use super::{Bound, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::mask::AttnMask;
use crate::tensor::Var;

/// Scaled dot-product attention over `heads` subspaces of width
/// `d_model / heads`, with projections for queries, keys, values and output.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
    d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(
                "heads",
                format!("d_model {d_model} is not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
            d_model,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn param_count(&self) -> usize {
        4 * (self.d_model * self.d_model + self.d_model)
    }

    /// Self-attention over `tokens: [S, T, d_model]`.
    pub fn forward<'t>(&self, params: &Bound<'t>, tokens: Var<'t>, mask: Option<&AttnMask>) -> Result<Var<'t>> {
        self.attend(params, tokens, tokens, mask)
    }

    /// Attention of `queries: [S, Tq, d_model]` over `context: [S, Tk, d_model]`.
    /// `mask`, when given, must be `Tq×Tk` (only square masks exist, so
    /// masked cross-attention requires `Tq == Tk`).
    pub fn attend<'t>(
        &self,
        params: &Bound<'t>,
        queries: Var<'t>,
        context: Var<'t>,
        mask: Option<&AttnMask>,
    ) -> Result<Var<'t>> {
        let (qs, ks) = (queries.shape(), context.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.d_model || ks[2] != self.d_model {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "attention",
                lhs: qs,
                rhs: ks,
            }));
        }
        let (s, tq, tk) = (qs[0], qs[1], ks[1]);
        if let Some(mask) = mask {
            if mask.size() != tq || mask.size() != tk {
                return Err(Error::Contract(format!(
                    "mask of size {} does not cover {tq} queries × {tk} keys",
                    mask.size()
                )));
            }
        }
        let h = self.heads;
        let dh = self.d_model / h;
        let split = |x: Var<'t>, t: usize| -> Result<Var<'t>> {
            Ok(x.reshape(&[s, t, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[s * h, t, dh])?)
        };
        let q = split(self.q.forward(params, queries)?, tq)?;
        let k = split(self.k.forward(params, context)?, tk)?;
        let v = split(self.v.forward(params, context)?, tk)?;

        let mut scores = q.bmm(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
        if let Some(mask) = mask.filter(|m| !m.is_full()) {
            scores = scores.add(queries.tape().constant(mask.bias()))?;
        }
        let weights = scores.softmax(2)?;
        let mixed = weights
            .bmm(v)?
            .reshape(&[s, h, tq, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[s, tq, self.d_model])?;
        self.o.forward(params, mixed)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::mask::{build_mask, AttentionMode};
    use crate::tensor::{Tape, Tensor};

    fn setup(d_model: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mha = MultiHeadAttention::new(&mut store, "attn", d_model, heads, &mut rng).unwrap();
        (store, mha)
    }

    fn tokens(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::new(&[1, t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(store: &ParamStore, mha: &MultiHeadAttention, x: &Tensor, mask: Option<&AttnMask>) -> Tensor {
        let tape = Tape::new();
        let p = store.bind(&tape);
        mha.forward(&p, tape.constant(x.clone()), mask)
            .unwrap()
            .value()
            .as_ref()
            .clone()
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn single_token_depends_only_on_itself() {
        let (store, mha) = setup(4, 2);
        let x = Tensor::new(&[1, 1, 4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        // with one key the softmax weight is 1: output = o(v(x))
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.constant(x.clone());
        let expected = mha.o.forward(&p, mha.v.forward(&p, xv).unwrap()).unwrap().value();
        assert!(run(&store, &mha, &x, None).max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn diagonal_mask_isolates_tokens() {
        let (store, mha) = setup(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = tokens(&mut rng, 4, 6);
        let diag: Vec<bool> = (0..16).map(|i| i % 5 == 0).collect();
        let mask = AttnMask::from_allow(4, 0, diag).unwrap();
        let base = run(&store, &mha, &x, Some(&mask));
        for j in 0..4 {
            let mut xp = x.clone();
            xp.data_mut()[j * 6 + 1] += 0.5;
            let out = run(&store, &mha, &xp, Some(&mask));
            for i in (0..4).filter(|&i| i != j) {
                for c in 0..6 {
                    assert_eq!(out.data()[i * 6 + c], base.data()[i * 6 + c]);
                }
            }
        }
    }

    #[test]
    fn identical_tokens_identical_outputs() {
        let (store, mha) = setup(4, 2);
        let x = Tensor::new(&[1, 2, 4], [0.3, -0.1, 0.7, 0.2].repeat(2)).unwrap();
        let y = run(&store, &mha, &x, None);
        assert_eq!(y.data()[..4], y.data()[4..]);
    }

    #[test]
    fn full_mask_equals_unmasked() {
        let (store, mha) = setup(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tokens(&mut rng, 5, 4);
        let fa = build_mask(AttentionMode::Fa, 3, 2).unwrap();
        let a = run(&store, &mha, &x, Some(&fa));
        let b = run(&store, &mha, &x, None);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let (store, mha) = setup(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = tokens(&mut rng, 5, 4);
        let mask = build_mask(AttentionMode::Nifa, 3, 2).unwrap();
        let perm = [4usize, 0, 3, 1, 2];
        let permuted = |t: &Tensor| {
            let mut out = Tensor::zeros(t.shape());
            for (dst, &src) in perm.iter().enumerate() {
                out.data_mut()[dst * 4..dst * 4 + 4].copy_from_slice(&t.data()[src * 4..src * 4 + 4]);
            }
            out
        };
        let allow: Vec<bool> = (0..25).map(|i| mask.allows(perm[i / 5], perm[i % 5])).collect();
        let pmask = AttnMask::from_allow(5, 0, allow).unwrap();
        let y = run(&store, &mha, &x, Some(&mask));
        let yp = run(&store, &mha, &permuted(&x), Some(&pmask));
        assert!(permuted(&y).max_abs_diff(&yp) < 1e-12);
    }

    #[test]
    fn mask_size_checked() {
        let (store, mha) = setup(4, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let mask = build_mask(AttentionMode::Fa, 2, 2).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(mha.forward(&p, x, Some(&mask)), Err(Error::Contract(_))));
    }
}
