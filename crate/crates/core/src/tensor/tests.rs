use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::{central_diff, random, rel_err, REL_TOL};

/// Central finite differences of `f` around every entry of `inputs`.
fn numeric_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
    inputs
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut g = Tensor::zeros(t.shape());
            let mut xs = inputs.to_vec();
            for i in 0..t.numel() {
                let mut point = t.clone();
                g.data_mut()[i] = central_diff(&mut point, i, |p| {
                    xs[k] = p.clone();
                    f(&xs)
                });
            }
            xs[k] = t.clone();
            g
        })
        .collect()
}

/// Builds the graph with `build`, then compares tape gradients against
/// finite differences of the same function evaluated without a tape.
fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        build(&tape, &vars).value().item()
    };
    let numeric = numeric_grads(inputs, &eval);
    let mut worst: f64 = 0.0;
    for (v, n) in vars.iter().zip(&numeric) {
        for (a, b) in grads.wrt(*v).data().iter().zip(n.data()) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    worst
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn probe<'t>(tape: &'t Tape, y: Var<'t>) -> Var<'t> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
    y.mul(tape.constant(w)).unwrap().sum_all()
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let id = tape.constant(Tensor::eye(2));
    assert_eq!(a.matmul(id).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let ones = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let out = a.matmul(ones).unwrap();
    assert_eq!(out.shape(), vec![2, 1]);
    assert_eq!(out.value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn matmul_xxt_backward() {
    // x·xᵀ is the 1×1 matrix [x₁² + x₂²], so the gradient is 2x.
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let loss = x.matmul(x.transpose().unwrap()).unwrap().sum_all();
    let g = tape.backward(loss).unwrap();
    let analytic = g.wrt(x).clone();
    let numeric = numeric_grads(&[Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()], &|xs| {
        let t = Tape::new();
        let x = t.constant(xs[0].clone());
        x.matmul(x.transpose().unwrap()).unwrap().sum_all().value().item()
    });
    assert!(analytic.max_abs_diff(&numeric[0]) < 1e-8);
    assert!(analytic.max_abs_diff(&Tensor::from_rows(&[vec![2.0, 4.0]]).unwrap()) < 1e-12);
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    let r = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).relu();
    assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);

    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let loss = x.mul(x).unwrap().sum_all();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn division_by_zero_is_detectable() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0]));
    let z = tape.constant(Tensor::vector(vec![0.0]));
    assert!(!a.div(z).unwrap().value().all_finite());
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = tape.constant(Tensor::vector(vec![0.0, 0.0])).softmax(0).unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);
    let s = tape
        .constant(Tensor::vector(vec![f64::NEG_INFINITY, 0.0]))
        .softmax(0)
        .unwrap();
    assert_eq!(s.value().data(), &[0.0, 1.0]);

    // exp/sum oracle without max subtraction
    let xs = [1.0f64, 2.0, 3.0];
    let denom: f64 = xs.iter().map(|x| x.exp()).sum();
    let s = tape.constant(Tensor::vector(xs.to_vec())).softmax(0).unwrap();
    for (got, x) in s.value().data().iter().zip(xs) {
        assert!((got - x.exp() / denom).abs() < 1e-15);
    }
    assert!(tape.constant(Tensor::vector(vec![1.0])).softmax(1).is_err());
}

#[test]
fn reduce_examples() {
    let tape = Tape::new();
    let m = tape.constant(Tensor::vector(vec![2.0, 4.0])).mean(0).unwrap();
    assert_eq!(m.value().data(), &[3.0]);
    let v = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0])).var(0).unwrap();
    assert_eq!(v.value().data(), &[0.0]);
    let v = tape.constant(Tensor::vector(vec![0.0, 2.0])).var(0).unwrap();
    assert_eq!(v.value().data(), &[1.0]);

    let x = tape.leaf(Tensor::zeros(&[2, 3]));
    let loss = x.sum(1).unwrap().sum_all();
    assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[1.0; 6]);
}

#[test]
fn layout_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector((1..=6).map(f64::from).collect()));
    let back = x.reshape(&[2, 3]).unwrap().reshape(&[6]).unwrap();
    assert_eq!(back.value().as_ref(), x.value().as_ref());
    assert!(x.reshape(&[4, 2]).is_err());

    let grid = x.reshape(&[2, 3]).unwrap();
    let t = grid.transpose().unwrap();
    assert_eq!(t.shape(), vec![3, 2]);
    assert_eq!(t.value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    assert_eq!(t.transpose().unwrap().value().as_ref(), grid.value().as_ref());

    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0]));
    assert_eq!(tape.concat(&[a, b], 0).unwrap().value().data(), &[1.0, 2.0, 3.0]);

    let s = x.slice(0, 2, 3).unwrap();
    assert_eq!(s.value().data(), &[3.0, 4.0, 5.0]);
    assert!(x.slice(0, 4, 3).is_err());
}

#[test]
fn unfold_extracts_windows() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = x.unfold(1, 0, 2, 2).unwrap();
    assert_eq!(p.shape(), vec![1, 2, 2]);
    assert_eq!(p.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let p = x.unfold(1, 1, 2, 1).unwrap();
    assert_eq!(p.value().data(), &[2.0, 3.0, 3.0, 4.0]);
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.leaf(Tensor::scalar(5.0));
    let loss = x.square();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).item(), 6.0);
    assert_eq!(g.wrt(y).item(), 0.0);

    let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(v), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let x = tape.leaf(Tensor::scalar(1.0));
    let g = tape.backward(x.mul(c).unwrap()).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.wrt(x).item(), 2.0);
}

#[test]
fn broadcast_add_reduces_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3, 2]));
    let b = tape.leaf(Tensor::zeros(&[2]));
    let loss = x.add(b).unwrap().sum_all();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(b).data(), &[3.0, 3.0]);
}

#[test]
fn every_op_passes_gradient_check_over_random_trials() {
    type Build = for<'t> fn(&'t Tape, &[Var<'t>]) -> Var<'t>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            probe(t, v[0].matmul(v[1]).unwrap())
        }),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, v| {
            probe(t, v[0].bmm(v[1]).unwrap())
        }),
        ("add_bcast", vec![vec![2, 3, 4], vec![3, 1]], |t, v| {
            probe(t, v[0].add(v[1]).unwrap())
        }),
        ("sub", vec![vec![3, 4], vec![4]], |t, v| {
            probe(t, v[0].sub(v[1]).unwrap())
        }),
        ("mul_bcast", vec![vec![2, 3, 4], vec![1, 3, 1]], |t, v| {
            probe(t, v[0].mul(v[1]).unwrap())
        }),
        ("div", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let d = v[1].square().add_scalar(0.5);
            probe(t, v[0].div(d).unwrap())
        }),
        ("relu", vec![vec![5, 3]], |t, v| probe(t, v[0].relu())),
        ("neg_square", vec![vec![4]], |t, v| probe(t, v[0].neg().square())),
        ("sqrt_exp", vec![vec![4]], |t, v| {
            probe(t, v[0].square().add_scalar(0.1).sqrt().exp())
        }),
        ("abs_recip", vec![vec![4]], |t, v| {
            probe(t, v[0].abs().add_scalar(0.5).recip())
        }),
        ("smooth_l1", vec![vec![6]], |t, v| probe(t, v[0].scale(2.0).smooth_l1())),
        ("softmax0", vec![vec![3, 4]], |t, v| probe(t, v[0].softmax(0).unwrap())),
        ("softmax1", vec![vec![2, 3, 4]], |t, v| {
            probe(t, v[0].softmax(1).unwrap())
        }),
        ("sum", vec![vec![3, 4]], |t, v| probe(t, v[0].sum(1).unwrap())),
        ("mean", vec![vec![3, 4]], |t, v| probe(t, v[0].mean(0).unwrap())),
        ("var", vec![vec![2, 5, 3]], |t, v| probe(t, v[0].var(1).unwrap())),
        ("reshape", vec![vec![2, 6]], |t, v| {
            probe(t, v[0].reshape(&[3, 4]).unwrap())
        }),
        ("permute", vec![vec![2, 3, 4]], |t, v| {
            probe(t, v[0].permute(&[2, 0, 1]).unwrap())
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |t, v| {
            probe(t, t.concat(&[v[0], v[1], v[0]], 1).unwrap())
        }),
        ("slice", vec![vec![3, 5]], |t, v| probe(t, v[0].slice(1, 1, 3).unwrap())),
        ("unfold", vec![vec![2, 7, 2]], |t, v| {
            probe(t, v[0].unfold(1, 1, 3, 2).unwrap())
        }),
        ("mean_all", vec![vec![3, 3]], |_, v| v[0].square().mean_all()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut trials = 0;
    for (name, shapes, build) in &cases {
        for _ in 0..5 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let err = check(&inputs, *build);
            assert!(err < REL_TOL, "{name}: relative error {err}");
            trials += 1;
        }
    }
    assert!(trials >= 100);
}

#[test]
fn composite_graph_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[3, 3]),
        random(&mut rng, &[3]),
    ];
    let err = check(&inputs, |t, v| {
        let h = v[0].matmul(v[1]).unwrap().add(v[2]).unwrap().relu();
        let a = h.softmax(1).unwrap();
        let z = a.mul(h).unwrap().sub(h.mean(0).unwrap()).unwrap();
        probe(t, z.square())
    });
    assert!(err < REL_TOL, "relative error {err}");
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random(&mut rng, &[5, 4]);
        let b = random(&mut rng, &[4, 3]);
        let tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let y = va.matmul(vb).unwrap().softmax(1).unwrap();
        let loss = probe(&tape, y);
        let g = tape.backward(loss).unwrap();
        (y.value().as_ref().clone(), g.wrt(va).clone(), g.wrt(vb).clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-50.0f64..50.0, 1..12), mask_first in any::<bool>()) {
        let mut xs = xs;
        if mask_first && xs.len() > 1 {
            xs[0] = f64::NEG_INFINITY;
        }
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(xs)).softmax(0).unwrap();
        let v = s.value();
        prop_assert!(v.data().iter().all(|p| *p >= 0.0));
        prop_assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layout_ops_route_gradients_inversely(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols]);
        let upstream = random(&mut rng, &[cols, rows]);
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let t = v.transpose().unwrap();
        // multiset of elements preserved
        let mut a = x.data().to_vec();
        let mut b = t.value().data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        let loss = t.mul(tape.constant(upstream.clone())).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        // gradient is the upstream tensor mapped back through the inverse layout
        let t2 = Tape::new();
        let back = t2.constant(upstream).transpose().unwrap();
        let expected = back.value();
        prop_assert_eq!(g.wrt(v), expected.as_ref());
    }
}
