//! Decay-mask construction: content gates, Manhattan geometry, and every
//! mask variant used by the attention layer and its ablations.
//!
//! Masks are additive attention biases with all entries `<= 0`. Full masks
//! are laid out `[B, N, L, L]` (`B = 1` for the data-independent variant);
//! the per-axis pair is `[B, N, H, W, W]` for rows and `[B, N, W, H, H]`
//! for columns.

pub mod dump;
mod graph_ops;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use graph_ops::{axis_mask_on, fused_mask_on, mask_1d_on};

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Spatial layout of an `H×W` token grid, flattened row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    h: usize,
    w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("grid", format!("extents must be positive, got {h}x{w}")));
        }
        Ok(Self { h, w })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn flatten(&self, h: usize, w: usize) -> usize {
        debug_assert!(h < self.h && w < self.w);
        h * self.w + w
    }

    pub fn unflatten(&self, i: usize) -> (usize, usize) {
        (i / self.w, i % self.w)
    }

    pub fn manhattan(&self, i: usize, j: usize) -> usize {
        let (hi, wi) = self.unflatten(i);
        let (hj, wj) = self.unflatten(j);
        hi.abs_diff(hj) + wi.abs_diff(wj)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// Which decay bias the attention layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecayVariant {
    None,
    Fixed,
    Cag,
    OneD,
    Bidirectional,
    Decomposed,
}

impl DecayVariant {
    pub const ALL: [DecayVariant; 6] = [
        DecayVariant::None,
        DecayVariant::Fixed,
        DecayVariant::Cag,
        DecayVariant::OneD,
        DecayVariant::Bidirectional,
        DecayVariant::Decomposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecayVariant::None => "none",
            DecayVariant::Fixed => "fixed",
            DecayVariant::Cag => "cag",
            DecayVariant::OneD => "1d",
            DecayVariant::Bidirectional => "bidir",
            DecayVariant::Decomposed => "decomposed",
        }
    }
}

impl fmt::Display for DecayVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecayVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => DecayVariant::None,
            "fixed" => DecayVariant::Fixed,
            "cag" => DecayVariant::Cag,
            "1d" => DecayVariant::OneD,
            "bidir" | "bidirectional" => DecayVariant::Bidirectional,
            "decomposed" => DecayVariant::Decomposed,
            other => return Err(Error::Config(format!("unknown decay variant `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Masks between tokens of the same row (`W×W` per row).
    Width,
    /// Masks between tokens of the same column (`H×H` per column).
    Height,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskLayout {
    Full,
    Decomposed,
}

/// Log-sigmoid decay strengths `[B, L, N]`, every entry `<= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateField<T: Scalar> {
    values: Tensor<T>,
}

impl<T: Scalar> GateField<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::invalid("gate_field", format!("expected [B, L, N], got {:?}", values.shape())));
        }
        if let Some(v) = values.data().iter().find(|v| !(**v <= T::zero())) {
            return Err(Error::invalid("gate_field", format!("gate value {v} is not <= 0")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Full additive decay bias `[B, N, L, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMask<T: Scalar> {
    pub bias: Tensor<T>,
    pub alpha: Option<T>,
}

/// Per-axis decay biases for the decomposed attention path.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMasks<T: Scalar> {
    /// `[B, N, W, H, H]`
    pub height: Tensor<T>,
    /// `[B, N, H, W, W]`
    pub width: Tensor<T>,
}

/// `F = X · W_g` per position: `[B,H,W,D] × [D,N] → [B,H,W,N]`.
pub fn gate_logits<T: Scalar>(x: &Tensor<T>, w_g: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || w_g.rank() != 2 || x.shape()[3] != w_g.shape()[0] {
        return Err(Error::shape("gate_logits", x.shape(), w_g.shape()));
    }
    // plain index-order accumulation keeps the logits reproducible across
    // GEMM backends
    let (d, n) = (w_g.shape()[0], w_g.shape()[1]);
    let w = w_g.data();
    let mut out = Vec::with_capacity(x.numel() / d * n);
    for row in x.data().chunks(d) {
        for j in 0..n {
            let mut acc = T::zero();
            for (k, &v) in row.iter().enumerate() {
                acc += v * w[k * n + j];
            }
            out.push(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[3] = n;
    Tensor::new(shape, out)
}

/// `G = log σ(F)` with the spatial dims flattened: `[B,H,W,N] → [B,L,N]`.
pub fn gates_from_logits<T: Scalar>(f: &Tensor<T>) -> Result<GateField<T>> {
    let [b, h, w, n] = f.shape()[..] else {
        return Err(Error::invalid("gates_from_logits", format!("expected [B,H,W,N], got {:?}", f.shape())));
    };
    GateField::new(f.log_sigmoid().into_reshape(vec![b, h * w, n])?)
}

pub fn manhattan_matrix<T: Scalar>(grid: Grid) -> Tensor<T> {
    let l = grid.len();
    Tensor::from_fn(vec![l, l], |k| T::of(grid.manhattan(k / l, k % l) as f64))
}

fn check_alpha<T: Scalar>(alpha: T) -> Result<()> {
    if !(alpha > T::zero()) || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

fn check_gate_len<T: Scalar>(gates: &Tensor<T>, grid: Grid, op: &'static str) -> Result<(usize, usize)> {
    let [b, l, n] = gates.shape()[..] else {
        return Err(Error::invalid(op, format!("gates must be [B, L, N], got {:?}", gates.shape())));
    };
    if l != grid.len() {
        return Err(Error::shape(op, gates.shape(), &[grid.height(), grid.width()]));
    }
    Ok((b, n))
}

/// Distances as scalars, row-major `[L, L]`.
fn distance_table<T: Scalar>(grid: Grid) -> Vec<T> {
    manhattan_matrix::<T>(grid).into_data()
}

/// `½(G[i] + G[j]) · d_M(i, j) · α`, before the `-|·|` step.
pub(crate) fn combined_values<T: Scalar>(gates: &Tensor<T>, grid: Grid, alpha: T) -> Result<Tensor<T>> {
    check_alpha(alpha)?;
    let (b, n) = check_gate_len(gates, grid, "fused_mask")?;
    let l = grid.len();
    let dist = distance_table::<T>(grid);
    let half = T::of(0.5);
    let g = gates.data();
    let mut out = vec![T::zero(); b * n * l * l];
    let mut column = vec![T::zero(); l];
    for bi in 0..b {
        for ni in 0..n {
            for (i, c) in column.iter_mut().enumerate() {
                *c = g[(bi * l + i) * n + ni];
            }
            let block = &mut out[(bi * n + ni) * l * l..][..l * l];
            for i in 0..l {
                let gi = column[i];
                let row = &mut block[i * l..(i + 1) * l];
                for ((m, &gj), &d) in row.iter_mut().zip(&column).zip(&dist[i * l..(i + 1) * l]) {
                    *m = half * (gi + gj) * d * alpha;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, n, l, l], out))
}

/// The combined decay before the `-|·|` step; equal to [`fused_mask`]
/// whenever the gate field invariants hold.
pub fn combined_mask<T: Scalar>(gates: &GateField<T>, grid: Grid, alpha: T) -> Result<DecayMask<T>> {
    Ok(DecayMask { bias: combined_values(gates.values(), grid, alpha)?, alpha: Some(alpha) })
}

pub(crate) fn fused_values<T: Scalar>(gates: &Tensor<T>, grid: Grid, alpha: T) -> Result<Tensor<T>> {
    Ok(combined_values(gates, grid, alpha)?.map(|c| -c.abs()))
}

/// Content-aware spatial decay: `-|½(G[i] + G[j]) · d_M(i, j) · α|`.
pub fn fused_mask<T: Scalar>(gates: &GateField<T>, grid: Grid, alpha: T) -> Result<DecayMask<T>> {
    Ok(DecayMask { bias: fused_values(gates.values(), grid, alpha)?, alpha: Some(alpha) })
}

/// Per-head decay rates log-spaced over `[0.1, 1.0]`.
pub fn default_lambdas(heads: usize) -> Vec<f64> {
    if heads <= 1 {
        return vec![0.1; heads];
    }
    (0..heads)
        .map(|k| 0.1 * 10f64.powf(k as f64 / (heads - 1) as f64))
        .collect()
}

/// Data-independent decay `-λ_n · d_M(i, j)`, shaped `[1, N, L, L]`.
pub fn fixed_spatial_mask<T: Scalar>(grid: Grid, lambdas: &Tensor<T>) -> Result<DecayMask<T>> {
    if lambdas.rank() != 1 {
        return Err(Error::invalid("fixed_spatial_mask", format!("lambdas must be [N], got {:?}", lambdas.shape())));
    }
    if let Some(v) = lambdas.data().iter().find(|v| !(**v > T::zero())) {
        return Err(Error::Config(format!("decay rate must be positive, got {v}")));
    }
    let l = grid.len();
    let dist = distance_table::<T>(grid);
    let mut out = Vec::with_capacity(lambdas.numel() * l * l);
    for &lam in lambdas.data() {
        out.extend(dist.iter().map(|&d| -(lam * d)));
    }
    Ok(DecayMask { bias: Tensor::from_parts(vec![1, lambdas.numel(), l, l], out), alpha: None })
}

pub(crate) fn mask_1d_values<T: Scalar>(gates: &Tensor<T>, direction: Direction) -> Result<Tensor<T>> {
    let [b, l, n] = gates.shape()[..] else {
        return Err(Error::invalid("mask_1d", format!("gates must be [B, L, N], got {:?}", gates.shape())));
    };
    let g = gates.data();
    let half = T::of(0.5);
    let mut out = vec![T::zero(); b * n * l * l];
    let mut seq = vec![T::zero(); l];
    for bi in 0..b {
        for ni in 0..n {
            for (k, s) in seq.iter_mut().enumerate() {
                *s = g[(bi * l + k) * n + ni];
            }
            let block = &mut out[(bi * n + ni) * l * l..][..l * l];
            for i in 0..l {
                let (mut fwd, mut rev) = (T::zero(), T::zero());
                for j in i + 1..l {
                    fwd += seq[j - 1];
                    rev += seq[j];
                    let m = match direction {
                        Direction::Forward => fwd,
                        Direction::Bidirectional => half * (fwd + rev),
                    };
                    block[i * l + j] = m;
                    block[j * l + i] = m;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, n, l, l], out))
}

/// Flattened-sequence decay: `M[i,j] = Σ_{k=min}^{max-1} g_k`, mirrored over
/// the index gap so the mask is defined for every pair. The bidirectional
/// form averages this with the same cumulative sum taken over the reversed
/// sequence, `Σ_{k=min+1}^{max} g_k`.
pub fn mask_1d<T: Scalar>(gates: &Tensor<T>, direction: Direction) -> Result<DecayMask<T>> {
    if gates.data().iter().any(|v| !(*v <= T::zero())) {
        return Err(Error::invalid("mask_1d", "gates must be <= 0"));
    }
    Ok(DecayMask { bias: mask_1d_values(gates, direction)?, alpha: None })
}

/// `-Σ_{k=min}^{max-1} |G[k]|` along one axis, for every row (width) or
/// column (height) of the grid.
pub(crate) fn axis_values<T: Scalar>(gates: &Tensor<T>, grid: Grid, axis: Axis) -> Result<Tensor<T>> {
    let (b, n) = check_gate_len(gates, grid, "axis_mask")?;
    let (lines, len) = match axis {
        Axis::Width => (grid.height(), grid.width()),
        Axis::Height => (grid.width(), grid.height()),
    };
    let position = |line: usize, k: usize| match axis {
        Axis::Width => grid.flatten(line, k),
        Axis::Height => grid.flatten(k, line),
    };
    let g = gates.data();
    let mut out = vec![T::zero(); b * n * lines * len * len];
    let mut seq = vec![T::zero(); len];
    for bi in 0..b {
        for ni in 0..n {
            for line in 0..lines {
                for (k, s) in seq.iter_mut().enumerate() {
                    *s = g[(bi * grid.len() + position(line, k)) * n + ni].abs();
                }
                let block = &mut out[((bi * n + ni) * lines + line) * len * len..][..len * len];
                for i in 0..len {
                    let mut acc = T::zero();
                    for j in i + 1..len {
                        acc += seq[j - 1];
                        block[i * len + j] = -acc;
                        block[j * len + i] = -acc;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, n, lines, len, len], out))
}

/// Per-axis masks from gate fields already passed through `log σ`.
pub fn axis_masks_from_gates<T: Scalar>(
    gates_h: &GateField<T>,
    gates_w: &GateField<T>,
    grid: Grid,
) -> Result<AxisMasks<T>> {
    Ok(AxisMasks {
        height: axis_values(gates_h.values(), grid, Axis::Height)?,
        width: axis_values(gates_w.values(), grid, Axis::Width)?,
    })
}

/// Decomposed row/column masks straight from features `x: [B,H,W,D]`.
pub fn decomposed_masks<T: Scalar>(x: &Tensor<T>, w_gh: &Tensor<T>, w_gw: &Tensor<T>) -> Result<AxisMasks<T>> {
    let [_, h, w, _] = x.shape()[..] else {
        return Err(Error::invalid("decomposed_masks", format!("expected [B,H,W,D], got {:?}", x.shape())));
    };
    if w_gh.shape() != w_gw.shape() {
        return Err(Error::shape("decomposed_masks", w_gh.shape(), w_gw.shape()));
    }
    let grid = Grid::new(h, w)?;
    let gh = gates_from_logits(&gate_logits(x, w_gh)?)?;
    let gw = gates_from_logits(&gate_logits(x, w_gw)?)?;
    axis_masks_from_gates(&gh, &gw, grid)
}

/// Stored mask elements per batch item.
pub fn mask_memory_footprint(layout: MaskLayout, grid: Grid, heads: usize) -> usize {
    let (h, w) = (grid.height(), grid.width());
    match layout {
        MaskLayout::Full => heads * grid.len() * grid.len(),
        MaskLayout::Decomposed => heads * (h * w * w + w * h * h),
    }
}
