use super::{Graph, Node, Op};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{depthwise_conv2d_backward, linalg, reduce_to, Tensor};

const GELU_CUBIC: f64 = 0.044715;

fn gelu_k<T: Scalar>() -> T {
    T::of((2.0 / std::f64::consts::PI).sqrt())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = gelu_k::<T>() * (x + T::of(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_CUBIC);
    let u = gelu_k::<T>() * (x + c * x * x * x);
    let th = u.tanh();
    let du = gelu_k::<T>() * (T::one() + T::of(3.0) * c * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

fn like<T: Scalar>(t: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(t.shape().to_vec(), data)
}

fn unbroadcast<T: Scalar>(g: &Tensor<T>, target: &Tensor<T>, sign: T) -> Tensor<T> {
    let mut data = reduce_to(g.data(), g.shape(), target.shape());
    if sign != T::one() {
        data.iter_mut().for_each(|v| *v = *v * sign);
    }
    Tensor::from_parts(target.shape().to_vec(), data)
}

/// Gradient contributions for each of `node`'s inputs, in `Op::inputs` order.
pub(super) fn vjp<T: Scalar>(graph: &Graph<T>, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
    let val = |v| &graph.nodes[super::Var::index(v)].value;
    let wants = |v| graph.nodes[super::Var::index(v)].requires_grad;
    let y = &node.value;
    let gd = g.data();
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            Some(unbroadcast(g, val(*a), T::one())),
            Some(unbroadcast(g, val(*b), T::one())),
        ],
        Op::Sub(a, b) => vec![
            Some(unbroadcast(g, val(*a), T::one())),
            Some(unbroadcast(g, val(*b), -T::one())),
        ],
        Op::Mul(a, b) => {
            let (x, z) = (val(*a), val(*b));
            let ga = wants(*a)
                .then(|| -> Result<_> { Ok(unbroadcast(&g.mul(z)?, x, T::one())) })
                .transpose()?;
            let gb = wants(*b)
                .then(|| -> Result<_> { Ok(unbroadcast(&g.mul(x)?, z, T::one())) })
                .transpose()?;
            vec![ga, gb]
        }
        Op::Scale(_, c) => vec![Some(g.scale(*c))],
        Op::Neg(_) => vec![Some(g.neg())],
        Op::Abs(a) => {
            let x = val(*a);
            let d = x
                .data()
                .iter()
                .zip(gd)
                .map(|(&xv, &gv)| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(like(x, d))]
        }
        Op::Sigmoid(_) => {
            let d = y.data().iter().zip(gd).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
            vec![Some(like(y, d))]
        }
        Op::LogSigmoid(a) => {
            // d/dx log σ(x) = σ(-x)
            let x = val(*a);
            let d = x.data().iter().zip(gd).map(|(&xv, &gv)| gv * (-xv).sigmoid()).collect();
            vec![Some(like(x, d))]
        }
        Op::Gelu(a) => {
            let x = val(*a);
            let d = x.data().iter().zip(gd).map(|(&xv, &gv)| gv * gelu_grad(xv)).collect();
            vec![Some(like(x, d))]
        }
        Op::MatMul { a, b, transpose_b, plan } => {
            let (x, z) = (val(*a), val(*b));
            let (ga, gb) = linalg::backward(plan, x.data(), z.data(), gd, *transpose_b, wants(*a), wants(*b));
            vec![ga.map(|d| like(x, d)), gb.map(|d| like(z, d))]
        }
        Op::Softmax(_) => {
            let n = y.shape().last().copied().unwrap_or(1);
            let mut d = vec![T::zero(); y.numel()];
            for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for ((dv, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = p * (q - dot);
                }
            }
            vec![Some(like(y, d))]
        }
        Op::LogSoftmax(_) => {
            let n = y.shape().last().copied().unwrap_or(1);
            let mut d = vec![T::zero(); y.numel()];
            for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                let total: T = gr.iter().copied().sum();
                for ((dv, &ly), &q) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = q - ly.exp() * total;
                }
            }
            vec![Some(like(y, d))]
        }
        Op::Sum(a) => {
            let x = val(*a);
            vec![Some(Tensor::full(x.shape().to_vec(), gd[0]))]
        }
        Op::SumAxis(a, axis) => {
            let x = val(*a);
            let shape = x.shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut d = Vec::with_capacity(x.numel());
            for o in 0..outer {
                for _ in 0..len {
                    d.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(like(x, d))]
        }
        Op::Reshape(a) => vec![Some(g.reshape(val(*a).shape().to_vec())?)],
        Op::Permute(_, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            vec![Some(g.permute(&inverse)?)]
        }
        Op::DepthwiseConv(x, k) => {
            let (xv, kv) = (val(*x), val(*k));
            let (gx, gk) = depthwise_conv2d_backward(xv, kv, gd);
            vec![Some(like(xv, gx)), Some(like(kv, gk))]
        }
        Op::LayerNorm(a, eps) => {
            let x = val(*a);
            let n = x.shape().last().copied().unwrap_or(1);
            let inv_n = T::one() / T::of(n as f64);
            let mut d = vec![T::zero(); x.numel()];
            let rows = x.data().chunks(n).zip(y.data().chunks(n)).zip(gd.chunks(n));
            for (dr, ((xr, yr), gr)) in d.chunks_mut(n).zip(rows) {
                let mean = xr.iter().copied().sum::<T>() * inv_n;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let rstd = T::one() / (var + *eps).sqrt();
                let g_mean = gr.iter().copied().sum::<T>() * inv_n;
                let gy_mean = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>() * inv_n;
                for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = rstd * (gv - g_mean - yv * gy_mean);
                }
            }
            vec![Some(like(x, d))]
        }
        Op::Custom(op, ins) => {
            let inputs: Vec<&Tensor<T>> = ins.iter().map(|&v| val(v)).collect();
            op.backward(&inputs, y, g)?
        }
    };
    Ok(out)
}
