//! Differentiable wrappers recording the mask builders on a tape.

use super::{axis_values, check_gate_len, combined_values, distance_table, mask_1d_values, Axis, Direction, Grid};
use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

struct FusedMaskOp<T: Scalar> {
    grid: Grid,
    alpha: T,
}

impl<T: Scalar> CustomOp<T> for FusedMaskOp<T> {
    fn name(&self) -> &'static str {
        "fused_mask"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gates = inputs[0];
        let combined = combined_values(gates, self.grid, self.alpha)?;
        let (b, n) = check_gate_len(gates, self.grid, "fused_mask")?;
        let l = self.grid.len();
        let dist = distance_table::<T>(self.grid);
        let coef = T::of(0.5) * self.alpha;
        let mut dg = vec![T::zero(); gates.numel()];
        let (c, gd) = (combined.data(), grad.data());
        for bi in 0..b {
            for ni in 0..n {
                let base = (bi * n + ni) * l * l;
                for i in 0..l {
                    for j in 0..l {
                        let k = base + i * l + j;
                        // M = -|c|, c = ½(g_i + g_j)·d·α
                        let t = -sign(c[k]) * gd[k] * coef * dist[i * l + j];
                        dg[(bi * l + i) * n + ni] += t;
                        dg[(bi * l + j) * n + ni] += t;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(gates.shape().to_vec(), dg))])
    }
}

/// Records `fused_mask` over gates `[B, L, N]` on the tape.
pub fn fused_mask_on<T: Scalar>(g: &mut Graph<T>, gates: Var, grid: Grid, alpha: T) -> Result<Var> {
    let combined = combined_values(g.try_value(gates)?, grid, alpha)?;
    let value = combined.map(|c| -c.abs());
    g.counters_mut().full_masks += 1;
    g.custom(Box::new(FusedMaskOp { grid, alpha }), &[gates], value)
}

/// Adds `v` to `acc[k]` for every `k` in `[lo, hi)` via a difference array.
fn cover<T: Scalar>(diff: &mut [T], lo: usize, hi: usize, v: T) {
    diff[lo] += v;
    diff[hi] -= v;
}

fn prefix<T: Scalar>(diff: &[T], len: usize) -> Vec<T> {
    let mut acc = T::zero();
    (0..len)
        .map(|k| {
            acc += diff[k];
            acc
        })
        .collect()
}

struct Mask1dOp {
    direction: Direction,
}

impl<T: Scalar> CustomOp<T> for Mask1dOp {
    fn name(&self) -> &'static str {
        match self.direction {
            Direction::Forward => "mask_1d",
            Direction::Bidirectional => "mask_bidirectional",
        }
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gates = inputs[0];
        let [b, l, n] = gates.shape()[..] else { unreachable!("checked in forward") };
        let gd = grad.data();
        let half = T::of(0.5);
        let mut dg = vec![T::zero(); gates.numel()];
        let mut fwd = vec![T::zero(); l + 1];
        let mut rev = vec![T::zero(); l + 2];
        for bi in 0..b {
            for ni in 0..n {
                fwd.iter_mut().for_each(|v| *v = T::zero());
                rev.iter_mut().for_each(|v| *v = T::zero());
                let base = (bi * n + ni) * l * l;
                for i in 0..l {
                    for j in i + 1..l {
                        let v = gd[base + i * l + j] + gd[base + j * l + i];
                        match self.direction {
                            Direction::Forward => cover(&mut fwd, i, j, v),
                            Direction::Bidirectional => {
                                cover(&mut fwd, i, j, half * v);
                                cover(&mut rev, i + 1, j + 1, half * v);
                            }
                        }
                    }
                }
                let f = prefix(&fwd, l);
                let r = prefix(&rev, l);
                for k in 0..l {
                    dg[(bi * l + k) * n + ni] = f[k] + r[k];
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(gates.shape().to_vec(), dg))])
    }
}

/// Records the flattened-sequence mask over gates `[B, L, N]`.
pub fn mask_1d_on<T: Scalar>(g: &mut Graph<T>, gates: Var, direction: Direction) -> Result<Var> {
    let value = mask_1d_values(g.try_value(gates)?, direction)?;
    g.counters_mut().full_masks += 1;
    g.custom(Box::new(Mask1dOp { direction }), &[gates], value)
}

struct AxisMaskOp {
    grid: Grid,
    axis: Axis,
}

impl<T: Scalar> CustomOp<T> for AxisMaskOp {
    fn name(&self) -> &'static str {
        match self.axis {
            Axis::Width => "axis_mask_width",
            Axis::Height => "axis_mask_height",
        }
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gates = inputs[0];
        let (b, n) = check_gate_len(gates, self.grid, "axis_mask")?;
        let grid = self.grid;
        let (lines, len) = match self.axis {
            Axis::Width => (grid.height(), grid.width()),
            Axis::Height => (grid.width(), grid.height()),
        };
        let position = |line: usize, k: usize| match self.axis {
            Axis::Width => grid.flatten(line, k),
            Axis::Height => grid.flatten(k, line),
        };
        let (gv, gd) = (gates.data(), grad.data());
        let mut dg = vec![T::zero(); gates.numel()];
        let mut diff = vec![T::zero(); len + 1];
        for bi in 0..b {
            for ni in 0..n {
                for line in 0..lines {
                    diff.iter_mut().for_each(|v| *v = T::zero());
                    let base = ((bi * n + ni) * lines + line) * len * len;
                    for i in 0..len {
                        for j in i + 1..len {
                            cover(&mut diff, i, j, gd[base + i * len + j] + gd[base + j * len + i]);
                        }
                    }
                    let c = prefix(&diff, len);
                    for k in 0..len {
                        let idx = (bi * grid.len() + position(line, k)) * n + ni;
                        // d(-|g|)/dg = -sign(g)
                        dg[idx] += -sign(gv[idx]) * c[k];
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(gates.shape().to_vec(), dg))])
    }
}

/// Records one per-axis mask over gates `[B, L, N]` (already `log σ`-ed).
pub fn axis_mask_on<T: Scalar>(g: &mut Graph<T>, gates: Var, grid: Grid, axis: Axis) -> Result<Var> {
    let value = axis_values(g.try_value(gates)?, grid, axis)?;
    g.counters_mut().axis_masks += 1;
    g.custom(Box::new(AxisMaskOp { grid, axis }), &[gates], value)
}
