//! Dense matrix kernels over the two trailing dims, with leading batch
//! dims broadcast. All kernels accumulate into `c`.

use super::broadcast::{broadcast_shape, strides};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (k, 1), b, (1, k), c);
}

/// c[m,n] += a[k,m]ᵀ · b[k,n]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (1, m), b, (n, 1), c);
}

/// Geometry of a batched product `a ⊗ b` after broadcasting the batch dims.
#[derive(Clone, Debug)]
pub(crate) struct BatchPlan {
    pub out_shape: Vec<usize>,
    /// (matrix offset into a, matrix offset into b) per output batch item
    pub pairs: Vec<(usize, usize)>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

/// `transpose_b` selects `a·bᵀ` (b is `[.., n, k]`) instead of `a·b`.
pub(crate) fn plan(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    transpose_b: bool,
) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(op, a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if transpose_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(Error::shape(op, a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shape(ab, bb).ok_or_else(|| Error::shape(op, a, b))?;
    let nb: usize = batch.iter().product();
    let rank = batch.len();
    let view = |shape: &[usize]| -> Vec<usize> {
        let own = strides(shape);
        let off = rank - shape.len();
        (0..rank)
            .map(|i| if i < off || shape[i - off] == 1 { 0 } else { own[i - off] })
            .collect()
    };
    let (sa, sb) = (view(ab), view(bb));
    let out_strides = strides(&batch);
    let pairs = (0..nb)
        .map(|lin| {
            let (mut oa, mut ob, mut rem) = (0, 0, lin);
            for d in 0..rank {
                let i = rem / out_strides[d];
                rem %= out_strides[d];
                oa += i * sa[d];
                ob += i * sb[d];
            }
            (oa * m * k, ob * k * n)
        })
        .collect();
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(BatchPlan { out_shape, pairs, m, k, n })
}

pub(crate) fn forward<T: Scalar>(p: &BatchPlan, a: &[T], b: &[T], transpose_b: bool) -> Vec<T> {
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![T::zero(); p.pairs.len() * m * n];
    for (bi, &(oa, ob)) in p.pairs.iter().enumerate() {
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        if transpose_b {
            gemm_nt(&a[oa..oa + m * k], &b[ob..ob + n * k], c, m, k, n);
        } else {
            gemm_nn(&a[oa..oa + m * k], &b[ob..ob + k * n], c, m, k, n);
        }
    }
    out
}

/// Gradients of the batched product w.r.t. both operands; broadcast batch
/// items accumulate into the shared operand slot.
pub(crate) fn backward<T: Scalar>(
    p: &BatchPlan,
    a: &[T],
    b: &[T],
    grad: &[T],
    transpose_b: bool,
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, n) = (p.m, p.k, p.n);
    let mut ga = want_a.then(|| vec![T::zero(); a.len()]);
    let mut gb = want_b.then(|| vec![T::zero(); b.len()]);
    for (bi, &(oa, ob)) in p.pairs.iter().enumerate() {
        let g = &grad[bi * m * n..(bi + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            let dst = &mut ga[oa..oa + m * k];
            if transpose_b {
                gemm_nn(g, &b[ob..ob + n * k], dst, m, n, k);
            } else {
                gemm_nt(g, &b[ob..ob + k * n], dst, m, n, k);
            }
        }
        if let Some(gb) = gb.as_mut() {
            if transpose_b {
                gemm_tn(g, &a[oa..oa + m * k], &mut gb[ob..ob + n * k], n, m, k);
            } else {
                gemm_tn(&a[oa..oa + m * k], g, &mut gb[ob..ob + k * n], k, m, n);
            }
        }
    }
    (ga, gb)
}
