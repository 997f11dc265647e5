//! Reverse-mode differentiation over a define-by-run tape.
//!
//! Every op evaluates eagerly and appends a node; `backward` walks the
//! nodes in exact reverse order. Ops outside the built-in set (the decay
//! masks, rotary embedding) plug in through [`CustomOp`].

mod backward;

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{linalg, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// An op whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` where the input is constant.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Neg(Var),
    Abs(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gelu(Var),
    MatMul { a: Var, b: Var, transpose_b: bool, plan: linalg::BatchPlan },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    DepthwiseConv(Var, Var),
    LayerNorm(Var, T),
    Custom(Box<dyn CustomOp<T>>, Vec<Var>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Neg(_) => "neg",
            Op::Abs(_) => "abs",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Gelu(_) => "gelu",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(_) => "softmax_rows",
            Op::LogSoftmax(_) => "log_softmax_rows",
            Op::Sum(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::DepthwiseConv(..) => "depthwise_conv2d",
            Op::LayerNorm(..) => "layer_norm",
            Op::Custom(op, _) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::DepthwiseConv(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Neg(a)
            | Op::Abs(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::LayerNorm(a, _) => vec![*a],
            Op::Custom(_, ins) => ins.clone(),
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Instrumentation for which mask shapes a forward pass materialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// `L×L` decay masks.
    pub full_masks: usize,
    /// Per-axis (`W×W` per row / `H×H` per column) decay masks.
    pub axis_masks: usize,
}

pub struct Graph<T: Scalar> {
    tape: u32,
    nodes: Vec<Node<T>>,
    check_finite: bool,
    counters: Counters,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// New tape with non-finite detection enabled.
    pub fn new() -> Self {
        Self {
            tape: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: true,
            counters: Counters::default(),
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn counters_mut(&mut self) -> &mut Counters {
        &mut self.counters
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.node(v).map(|n| &n.value).expect("variable from another tape")
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        self.node(v).map(|n| &n.value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.tape {
            return Err(Error::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(Error::ForeignVar)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.tape, index }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let mut requires_grad = false;
        for v in op.inputs() {
            requires_grad |= self.node(v)?.requires_grad;
        }
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string(), node: self.nodes.len() });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.node(a)?, self.node(b)?);
        x.value.zip_with(&y.value, op, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.node(a)?.value.scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.neg();
        self.push(v, Op::Neg(a))
    }

    /// `|x|`; the backward pass uses subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.abs();
        self.push(v, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.sigmoid();
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.log_sigmoid();
        self.push(v, Op::LogSigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(backward::gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the trailing two dims.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (x, y) = (&self.node(a)?.value, &self.node(b)?.value);
        let name = if transpose_b { "matmul_t" } else { "matmul" };
        let plan = linalg::plan(name, x.shape(), y.shape(), transpose_b)?;
        let data = linalg::forward(&plan, x.data(), y.data(), transpose_b);
        let value = Tensor::from_parts(plan.out_shape.clone(), data);
        self.push(value, Op::MatMul { a, b, transpose_b, plan })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.softmax_rows();
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.log_softmax_rows();
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.node(a)?.value.sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?.value.numel();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.node(a)?.value.sum_axis(axis)?;
        self.push(v, Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.node(a)?.value.shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.node(a)?.value.reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.node(a)?.value.permute(axes)?;
        self.push(v, Op::Permute(a, axes.to_vec()))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let v = self.node(x)?.value.depthwise_conv2d(&self.node(kernels)?.value)?;
        self.push(v, Op::DepthwiseConv(x, kernels))
    }

    /// Last-dim normalization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let v = self.node(a)?.value.layer_norm_rows(eps);
        self.push(v, Op::LayerNorm(a, eps))
    }

    /// Records a caller-evaluated op with a hand-written VJP.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var], output: Tensor<T>) -> Result<Var> {
        self.push(output, Op::Custom(op, inputs.to_vec()))
    }

    /// Reverse sweep seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
                continue;
            }
            let inputs = node.op.inputs();
            let contributions = backward::vjp(self, node, &g)?;
            for (v, c) in inputs.into_iter().zip(contributions) {
                let Some(c) = c else { continue };
                if !self.nodes[v.index].requires_grad {
                    continue;
                }
                match &mut grads[v.index] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { tape: self.tape, grads: leaves })
    }
}

/// Gradients of a scalar loss with respect to the differentiable leaves.
pub struct Gradients<T: Scalar> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Result<Tensor<T>> {
        let shape = graph.try_value(v)?.shape().to_vec();
        Ok(self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut g = Graph::new();
        let data = [1.0, -2.0, 3.5];
        let x = g.param(t(&[3], &data));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        for (gv, xv) in grads.get(x).unwrap().data().iter().zip(data) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn abs_gradient_is_sign() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-2.0, 5.0, 0.0]));
        let a = g.abs(x).unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn errors_for_non_scalar_and_foreign_vars() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let mut other = Graph::<f64>::new();
        let y = other.param(t(&[1], &[1.0]));
        assert!(matches!(g.backward(y), Err(Error::ForeignVar)));
        assert!(matches!(g.add(x, y), Err(Error::ForeignVar)));
    }

    #[test]
    fn non_finite_values_are_reported_with_op_name() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[f64::MAX]));
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref op, .. } if op == "scale"), "{err}");
        g.set_check_finite(false);
        assert!(g.scale(x, 10.0).is_ok());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }
}
