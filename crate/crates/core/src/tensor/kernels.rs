//! Raw loops over flat buffers shared by forward and backward rules.

/// `c (+)= op(a) · op(b)` for row-major buffers, where `op` optionally
/// transposes. `a` is logically `m×k`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // logical a[i][p] lives at i*rsa + p*csa
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are at least as large as the strided extents above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How the right operand of a binary op maps onto the left operand's layout.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    /// rhs repeats every `period` elements (rhs shape == lhs trailing dims).
    Cyclic(usize),
    General(Vec<usize>),
}

impl Broadcast {
    /// `rhs` broadcasts into `lhs` when, right-aligned, each rhs extent is
    /// either equal to the lhs extent or 1. Only the rhs is ever expanded.
    pub(crate) fn plan(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
        if lhs == rhs {
            return Some(Broadcast::Same);
        }
        if rhs.len() > lhs.len() {
            return None;
        }
        let offset = lhs.len() - rhs.len();
        let mut padded = vec![1usize; offset];
        padded.extend_from_slice(rhs);
        for (l, r) in lhs.iter().zip(&padded) {
            if r != l && *r != 1 {
                return None;
            }
        }
        if lhs[offset..] == *rhs {
            return Some(Broadcast::Cyclic(rhs.iter().product()));
        }
        // strides of rhs in lhs index space, zero on expanded axes
        let mut strides = vec![0usize; lhs.len()];
        let mut acc = 1;
        for ax in (0..lhs.len()).rev() {
            if padded[ax] != 1 {
                strides[ax] = acc;
            }
            acc *= padded[ax];
        }
        let numel: usize = lhs.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; lhs.len()];
        let mut off = 0usize;
        for _ in 0..numel {
            map.push(off);
            for ax in (0..lhs.len()).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < lhs[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Some(Broadcast::General(map))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cyclic(p) => i % p,
            Broadcast::General(map) => map[i],
        }
    }
}

/// Source index for each output element of an axis permutation.
pub(crate) fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Softmax over the middle extent of an (outer, len, inner) layout.
pub(crate) fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                y[base + j * inner] /= sum;
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn broadcast_plans() {
        assert!(matches!(Broadcast::plan(&[2, 3], &[2, 3]), Some(Broadcast::Same)));
        assert!(matches!(
            Broadcast::plan(&[4, 2, 3], &[2, 3]),
            Some(Broadcast::Cyclic(6))
        ));
        assert!(Broadcast::plan(&[2, 3], &[3, 3]).is_none());
        assert!(Broadcast::plan(&[3], &[2, 3]).is_none());
        let plan = Broadcast::plan(&[2, 3], &[2, 1]).unwrap();
        let idx: Vec<usize> = (0..6).map(|i| plan.index(i)).collect();
        assert_eq!(idx, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn permute_map_is_transpose_for_2d() {
        let map = permute_map(&[2, 3], &[1, 0]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }
}
