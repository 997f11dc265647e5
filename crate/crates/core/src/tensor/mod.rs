//! Dense row-major tensors and the forward kernels the rest of the crate
//! is built from. Transposes and permutations always materialize.

mod broadcast;
pub(crate) mod linalg;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use broadcast::broadcast_shape;
pub(crate) use broadcast::{reduce_to, strides, zip_broadcast};

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ..")?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(f).collect() }
    }

    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
    }

    /// Normal samples redrawn until they fall inside ±2σ.
    pub fn trunc_normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (&i, &d) in idx.iter().zip(&self.shape) {
            assert!(i < d, "index {idx:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn is_finite(&self) -> bool {
        // x - x is zero for finite x and NaN otherwise; lane sums vectorize
        let mut lanes = [T::zero(); 8];
        let chunks = self.data.chunks_exact(8);
        let tail = chunks.remainder();
        for c in chunks {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l += v - v;
            }
        }
        lanes.iter().all(|l| *l == T::zero()) && tail.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        let (shape, data) = zip_broadcast(op, &self.shape, &self.data, &other.shape, &other.data, f)?;
        Ok(Self { shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    pub fn sigmoid(&self) -> Self {
        self.map(Scalar::sigmoid)
    }

    pub fn log_sigmoid(&self) -> Self {
        self.map(Scalar::log_sigmoid)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for shape {:?}", self.shape)));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data: out })
    }

    /// Materialized axis permutation: output dim `i` is input dim `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("axes {axes:?} for shape {:?}", self.shape)));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.data.len();
        let mut data = Vec::with_capacity(n);
        if rank == 0 {
            return Ok(self.clone());
        }
        // innermost output dim is walked directly
        let last = rank - 1;
        let inner = out_shape[last];
        let inner_stride = src_strides[last];
        let mut idx = vec![0usize; rank];
        let mut base = 0usize;
        for _ in 0..n / inner {
            let mut off = base;
            for _ in 0..inner {
                data.push(self.data[off]);
                off += inner_stride;
            }
            for d in (0..last).rev() {
                idx[d] += 1;
                base += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                base -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Swaps the two trailing dims.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::invalid("transpose", "needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Matrix product over the trailing two dims with broadcast batch dims.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = linalg::plan("matmul", &self.shape, &other.shape, false)?;
        let data = linalg::forward(&plan, &self.data, &other.data, false);
        Ok(Self { shape: plan.out_shape, data })
    }

    /// `self · otherᵀ` over the trailing two dims.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let plan = linalg::plan("matmul_t", &self.shape, &other.shape, true)?;
        let data = linalg::forward(&plan, &self.data, &other.data, true);
        Ok(Self { shape: plan.out_shape, data })
    }

    pub fn softmax_rows(&self) -> Self {
        let n = self.last_dim();
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Self { shape: self.shape.clone(), data: out }
    }

    pub fn log_softmax_rows(&self) -> Self {
        let n = self.last_dim();
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Self { shape: self.shape.clone(), data: out }
    }

    /// Normalizes each last-dim slice to zero mean and unit variance.
    pub fn layer_norm_rows(&self, eps: T) -> Self {
        let n = self.last_dim();
        let inv_n = T::one() / T::of(n as f64);
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        Self { shape: self.shape.clone(), data: out }
    }

    /// Per-channel `k×k` convolution of a `[B,H,W,D]` map with zero padding.
    pub fn depthwise_conv2d(&self, kernels: &Self) -> Result<Self> {
        let (b, h, w, d, k) = conv_dims(self, kernels)?;
        let pad = k / 2;
        let x = &self.data;
        let kd = &kernels.data;
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let o = ((bi * h + hi) * w + wi) * d;
                    for dy in 0..k {
                        let Some(sh) = (hi + dy).checked_sub(pad).filter(|&s| s < h) else { continue };
                        for dx in 0..k {
                            let Some(sw) = (wi + dx).checked_sub(pad).filter(|&s| s < w) else { continue };
                            let src = &x[((bi * h + sh) * w + sw) * d..][..d];
                            let ker = &kd[(dy * k + dx) * d..][..d];
                            for ((ov, &sv), &kv) in out[o..o + d].iter_mut().zip(src).zip(ker) {
                                *ov += sv * kv;
                            }
                        }
                    }
                }
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

pub(crate) fn conv_dims<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let [b, h, w, d] = x.shape[..] else {
        return Err(Error::shape("depthwise_conv2d", &x.shape, &kernels.shape));
    };
    let [k, k2, kd] = kernels.shape[..] else {
        return Err(Error::shape("depthwise_conv2d", &x.shape, &kernels.shape));
    };
    if k != k2 || k % 2 == 0 || kd != d {
        return Err(Error::shape("depthwise_conv2d", &x.shape, &kernels.shape));
    }
    Ok((b, h, w, d, k))
}

pub(crate) fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    grad: &[T],
) -> (Vec<T>, Vec<T>) {
    let (b, h, w, d, k) = conv_dims(x, kernels).expect("checked in forward");
    let pad = k / 2;
    let mut gx = vec![T::zero(); x.data.len()];
    let mut gk = vec![T::zero(); kernels.data.len()];
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let o = ((bi * h + hi) * w + wi) * d;
                let g = &grad[o..o + d];
                for dy in 0..k {
                    let Some(sh) = (hi + dy).checked_sub(pad).filter(|&s| s < h) else { continue };
                    for dx in 0..k {
                        let Some(sw) = (wi + dx).checked_sub(pad).filter(|&s| s < w) else { continue };
                        let s = ((bi * h + sh) * w + sw) * d;
                        let ko = (dy * k + dx) * d;
                        for c in 0..d {
                            gx[s + c] += g[c] * kernels.data[ko + c];
                            gk[ko + c] += g[c] * x.data[s + c];
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f64>::scalar(3.0).numel(), 1);
    }

    #[test]
    fn matmul_hand_cases() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.5, -2.0, 3.0, 4.25]);
        assert_eq!(id.matmul(&m).unwrap(), m);
        let row = t(&[1, 2], &[1.0, 2.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
        let err = row.matmul(&row).unwrap_err().to_string();
        assert!(err.contains("[1, 2]"), "{err}");
    }

    #[test]
    fn softmax_hand_cases() {
        let s = t(&[3], &[0.0, 0.0, 0.0]).softmax_rows();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(t(&[1], &[123.0]).softmax_rows().data(), &[1.0]);
        let s = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).softmax_rows();
        for (v, e) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn depthwise_conv_hand_cases() {
        let x = Tensor::<f64>::ones(vec![1, 3, 3, 1]);
        let ones = Tensor::<f64>::ones(vec![3, 3, 1]);
        let y = x.depthwise_conv2d(&ones).unwrap();
        assert_eq!(y.at(&[0, 1, 1, 0]), 9.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 1, 0]), 6.0);

        let mut delta = Tensor::<f64>::zeros(vec![3, 3, 2]);
        delta.set(&[1, 1, 0], 1.0);
        delta.set(&[1, 1, 1], 1.0);
        let x = Tensor::from_fn(vec![2, 3, 4, 2], |i| i as f64 * 0.5 - 3.0);
        assert_eq!(x.depthwise_conv2d(&delta).unwrap(), x);
        let zero = Tensor::<f64>::zeros(vec![3, 3, 2]);
        assert!(x.depthwise_conv2d(&zero).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(x.depthwise_conv2d(&Tensor::zeros(vec![3, 3, 3])).is_err());
    }

    #[test]
    fn permute_matches_index_definition() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn broadcast_add_builds_pairwise_sums() {
        let col = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let row = t(&[1, 3], &[10.0, 20.0, 30.0]);
        let s = col.add(&row).unwrap();
        assert_eq!(s.shape(), &[3, 3]);
        assert_eq!(s.at(&[2, 1]), 23.0);
        assert!(t(&[2], &[1.0, 2.0]).add(&t(&[3], &[1.0, 2.0, 3.0])).is_err());
        assert_eq!(t(&[1], &[-3.0]).abs().data(), &[3.0]);
    }

    #[test]
    fn sum_axis_and_layer_norm() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 2], |i| i as f64);
        let s = x.sum_axis(1).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[6.0, 9.0, 24.0, 27.0]);
        let n = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]).layer_norm_rows(0.0);
        assert!(n.sum().abs() < 1e-12);
        let var: f64 = n.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-12);
    }
}
