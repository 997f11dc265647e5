use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the tensor engine is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Size in bytes, also used as the precision tag in checkpoints.
    const BYTES: usize;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c[m,n] += a[m,k] · b[k,n]` where `a` and `b` are addressed by
    /// `(row stride, column stride)` and `c` is row-major.
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], a_strides: (usize, usize), b: &[Self], b_strides: (usize, usize), c: &mut [Self]);

    /// `log(sigmoid(x))` evaluated as `-softplus(-x)`.
    fn log_sigmoid(self) -> Self {
        if self >= Self::zero() {
            -((-self).exp().ln_1p())
        } else {
            self - self.exp().ln_1p()
        }
    }

    fn sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn check_gemm(m: usize, k: usize, n: usize, a: usize, sa: (usize, usize), b: usize, sb: (usize, usize), c: usize) {
    let last = |rows: usize, cols: usize, s: (usize, usize)| (rows.max(1) - 1) * s.0 + (cols.max(1) - 1) * s.1;
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(last(m, k, sa) < a && last(k, n, sb) < b && m * n <= c, "gemm operands out of bounds");
}

impl Scalar for f32 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self]) {
        check_gemm(m, k, n, a.len(), sa, b.len(), sb, c.len());
        // SAFETY: check_gemm bounds every addressed element of a, b and c
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr(), sa.0 as isize, sa.1 as isize,
                b.as_ptr(), sb.0 as isize, sb.1 as isize,
                1.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    const BYTES: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self]) {
        check_gemm(m, k, n, a.len(), sa, b.len(), sb, c.len());
        // SAFETY: check_gemm bounds every addressed element of a, b and c
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), sa.0 as isize, sa.1 as isize,
                b.as_ptr(), sb.0 as isize, sb.1 as isize,
                1.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    const BYTES: usize = 8;

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_reference_points() {
        assert!((0.0f64.log_sigmoid() + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(50.0f64.log_sigmoid().abs() < 1e-20);
        let v = (-50.0f64).log_sigmoid();
        assert!(((v + 50.0) / 50.0).abs() < 1e-6);
        // -5 - ln(1 + e^-5)
        let expect = -5.0 - (-5.0f64).exp().ln_1p();
        assert!(((-5.0f64).log_sigmoid() - expect).abs() < 1e-15);
        assert!(((-5.0f64).log_sigmoid() + 5.0067).abs() < 1e-4);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(800.0f64.sigmoid(), 1.0);
        assert!((-800.0f64).sigmoid() >= 0.0);
        assert!((0.0f32.sigmoid() - 0.5).abs() < 1e-7);
    }
}
