//! Axial 2D rotary position embedding.
//!
//! The first half of each head's channels rotates with the row coordinate,
//! the second half with the column coordinate. Within a half of length `m`,
//! channel pair `(2i, 2i+1)` turns by `pos · base^(-2i/m)`.

use std::sync::Arc;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::decay::Grid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ROPE_BASE: f64 = 10_000.0;

/// Which coordinates drive the rotation angles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RopeAxes {
    Both,
    /// Column coordinate zeroed; used by row-wise attention.
    HeightOnly,
    /// Row coordinate zeroed; used by column-wise attention.
    WidthOnly,
}

#[derive(Clone, Debug)]
pub struct RopeTable<T: Scalar> {
    grid: Grid,
    head_dim: usize,
    inv_freq: Vec<f64>,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(grid: Grid, head_dim: usize, axes: RopeAxes) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::Config(format!("rotary head dim must be a multiple of 4, got {head_dim}")));
        }
        let quarter = head_dim / 4;
        let half = head_dim / 2;
        let inv_freq: Vec<f64> = (0..quarter)
            .map(|i| ROPE_BASE.powf(-((2 * i) as f64) / half as f64))
            .collect();
        let l = grid.len();
        let mut cos = Vec::with_capacity(l * half);
        let mut sin = Vec::with_capacity(l * half);
        for p in 0..l {
            let (h, w) = grid.unflatten(p);
            let (h, w) = match axes {
                RopeAxes::Both => (h, w),
                RopeAxes::HeightOnly => (h, 0),
                RopeAxes::WidthOnly => (0, w),
            };
            for pair in 0..half {
                let pos = if pair < quarter { h } else { w };
                let angle = pos as f64 * inv_freq[pair % quarter];
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Ok(Self { grid, head_dim, inv_freq, cos, sin })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn inv_freq(&self) -> &[f64] {
        &self.inv_freq
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        let r = shape.len();
        if r < 2 || shape[r - 1] != self.head_dim || shape[r - 2] != self.grid.len() {
            return Err(Error::shape("apply_rope", shape, &[self.grid.len(), self.head_dim]));
        }
        Ok(())
    }

    fn rotate(&self, x: &Tensor<T>, inverse: bool) -> Tensor<T> {
        let dk = self.head_dim;
        let half = dk / 2;
        let l = self.grid.len();
        let mut out = x.data().to_vec();
        for (row, chunk) in out.chunks_mut(dk).enumerate() {
            let p = row % l;
            let (c, s) = (&self.cos[p * half..(p + 1) * half], &self.sin[p * half..(p + 1) * half]);
            for pair in 0..half {
                let (x0, x1) = (chunk[2 * pair], chunk[2 * pair + 1]);
                let sn = if inverse { -s[pair] } else { s[pair] };
                chunk[2 * pair] = x0 * c[pair] - x1 * sn;
                chunk[2 * pair + 1] = x0 * sn + x1 * c[pair];
            }
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }

    /// Rotates `x: [.., L, d_k]` position by position.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x.shape())?;
        Ok(self.rotate(x, false))
    }
}

struct RopeOp<T: Scalar> {
    table: Arc<RopeTable<T>>,
}

impl<T: Scalar> CustomOp<T> for RopeOp<T> {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        // rotations are orthonormal: the VJP is the inverse rotation
        Ok(vec![Some(self.table.rotate(grad, true))])
    }
}

pub fn apply_rope<T: Scalar>(g: &mut Graph<T>, x: Var, table: &Arc<RopeTable<T>>) -> Result<Var> {
    let value = table.apply(g.try_value(x)?)?;
    g.custom(Box::new(RopeOp { table: Arc::clone(table) }), &[x], value)
}
