//! Size-1 broadcasting helpers shared by the elementwise kernels and their
//! gradient reductions. Shapes are aligned from the right, numpy style.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast dims.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Trailing-suffix check: `small` (leading ones stripped) equals the tail of `big`.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let first = small.iter().position(|&d| d != 1).unwrap_or(small.len());
        &small[first..]
    };
    trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == *trimmed
}

/// Visits every output position, handing the flat offsets into both operands.
fn for_each_offset(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for lin in 0..n {
        f(lin, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn zip_broadcast<T: Scalar>(
    op: &'static str,
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    let out = broadcast_shape(a_shape, b_shape).ok_or_else(|| Error::shape(op, a_shape, b_shape))?;
    let n: usize = out.iter().product();
    if a_shape == b_shape {
        return Ok((out, a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()));
    }
    if b.len() == 1 && a.len() == n {
        let y = b[0];
        return Ok((out, a.iter().map(|&x| f(x, y)).collect()));
    }
    if a.len() == 1 && b.len() == n {
        let x = a[0];
        return Ok((out, b.iter().map(|&y| f(x, y)).collect()));
    }
    if a.len() == n && is_suffix(b_shape, &out) {
        let m = b.len();
        return Ok((out, a.iter().enumerate().map(|(i, &x)| f(x, b[i % m])).collect()));
    }
    if b.len() == n && is_suffix(a_shape, &out) {
        let m = a.len();
        return Ok((out, b.iter().enumerate().map(|(i, &y)| f(a[i % m], y)).collect()));
    }
    let sa = view_strides(a_shape, &out);
    let sb = view_strides(b_shape, &out);
    let mut data = vec![T::zero(); n];
    for_each_offset(&out, &sa, &sb, |lin, ia, ib| data[lin] = f(a[ia], b[ib]));
    Ok((out, data))
}

/// Sums `grad` (shaped `from`) down onto the broadcast operand shape `to`.
pub(crate) fn reduce_to<T: Scalar>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return grad.to_vec();
    }
    let m: usize = to.iter().product();
    let mut acc = vec![T::zero(); m];
    if m == 1 {
        acc[0] = grad.iter().copied().sum();
        return acc;
    }
    if is_suffix(to, from) {
        for (i, &g) in grad.iter().enumerate() {
            acc[i % m] += g;
        }
        return acc;
    }
    let st = view_strides(to, from);
    let zeros = vec![0; from.len()];
    for_each_offset(from, &st, &zeros, |lin, it, _| acc[it] += grad[lin]);
    acc
}
