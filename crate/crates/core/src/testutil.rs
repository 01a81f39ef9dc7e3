//! Finite-difference helpers shared by the gradient tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of `f` with respect to entry `i` of `t`.
pub fn central_diff(t: &mut Tensor, i: usize, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let orig = t.data()[i];
    t.data_mut()[i] = orig + STEP;
    let plus = f(t);
    t.data_mut()[i] = orig - STEP;
    let minus = f(t);
    t.data_mut()[i] = orig;
    (plus - minus) / (2.0 * STEP)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}
