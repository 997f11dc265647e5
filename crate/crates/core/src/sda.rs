//! Spatial Decay Attention layer and the companion feed-forward block.
//!
//! Weights are generic over the handle type so the same structure holds
//! plain tensors for storage and tape variables during a forward pass.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::decay::{self, default_lambdas, Axis, DecayVariant, Direction, Grid};
use crate::error::{Error, Result};
use crate::rope::{apply_rope, RopeAxes, RopeTable};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LPE_KERNEL: usize = 3;
pub const FFN_RATIO: usize = 4;
pub const NORM_EPS: f64 = 1e-5;

/// How a layer materializes its decay bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionPath {
    /// One `L × L` mask per head.
    Full,
    /// Row then column attention with per-axis masks.
    Decomposed,
}

#[derive(Clone, Debug)]
pub enum GateWeights<P> {
    Full { w_g: P },
    Decomposed { w_gh: P, w_gw: P },
}

impl<P> GateWeights<P> {
    pub fn path(&self) -> AttentionPath {
        match self {
            GateWeights::Full { .. } => AttentionPath::Full,
            GateWeights::Decomposed { .. } => AttentionPath::Decomposed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttnWeights<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub gate: GateWeights<P>,
    pub w_u1: P,
    pub w_u2: P,
    /// Depthwise kernels `[k, k, D]`.
    pub lpe: P,
}

#[derive(Clone, Debug)]
pub struct FfnWeights<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Clone, Debug)]
pub struct NormWeights<P> {
    pub scale: P,
    pub shift: P,
}

/// One pre-norm block: `x + SDA(norm(x))`, then `x + FFN(norm(x))`.
#[derive(Clone, Debug)]
pub struct BlockWeights<P> {
    pub norm1: NormWeights<P>,
    pub attn: AttnWeights<P>,
    pub norm2: NormWeights<P>,
    pub ffn: FfnWeights<P>,
}

pub type SdaLayerParams<T> = BlockWeights<Tensor<T>>;

impl<P> BlockWeights<P> {
    /// Parameters in a fixed order, with stable local names.
    pub fn named(&self) -> Vec<(&'static str, &P)> {
        let a = &self.attn;
        let mut out = vec![
            ("norm1.scale", &self.norm1.scale),
            ("norm1.shift", &self.norm1.shift),
            ("attn.w_q", &a.w_q),
            ("attn.w_k", &a.w_k),
            ("attn.w_v", &a.w_v),
        ];
        match &a.gate {
            GateWeights::Full { w_g } => out.push(("attn.w_g", w_g)),
            GateWeights::Decomposed { w_gh, w_gw } => {
                out.push(("attn.w_gh", w_gh));
                out.push(("attn.w_gw", w_gw));
            }
        }
        out.extend([
            ("attn.w_u1", &a.w_u1),
            ("attn.w_u2", &a.w_u2),
            ("attn.lpe", &a.lpe),
            ("norm2.scale", &self.norm2.scale),
            ("norm2.shift", &self.norm2.shift),
            ("ffn.w1", &self.ffn.w1),
            ("ffn.b1", &self.ffn.b1),
            ("ffn.w2", &self.ffn.w2),
            ("ffn.b2", &self.ffn.b2),
        ]);
        out
    }

    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&'static str, &P) -> std::result::Result<Q, E>) -> std::result::Result<BlockWeights<Q>, E> {
        let a = &self.attn;
        let norm1 = NormWeights { scale: f("norm1.scale", &self.norm1.scale)?, shift: f("norm1.shift", &self.norm1.shift)? };
        let (w_q, w_k, w_v) = (f("attn.w_q", &a.w_q)?, f("attn.w_k", &a.w_k)?, f("attn.w_v", &a.w_v)?);
        let gate = match &a.gate {
            GateWeights::Full { w_g } => GateWeights::Full { w_g: f("attn.w_g", w_g)? },
            GateWeights::Decomposed { w_gh, w_gw } => {
                let w_gh = f("attn.w_gh", w_gh)?;
                GateWeights::Decomposed { w_gh, w_gw: f("attn.w_gw", w_gw)? }
            }
        };
        let (w_u1, w_u2, lpe) = (f("attn.w_u1", &a.w_u1)?, f("attn.w_u2", &a.w_u2)?, f("attn.lpe", &a.lpe)?);
        let norm2 = NormWeights { scale: f("norm2.scale", &self.norm2.scale)?, shift: f("norm2.shift", &self.norm2.shift)? };
        let ffn = FfnWeights {
            w1: f("ffn.w1", &self.ffn.w1)?,
            b1: f("ffn.b1", &self.ffn.b1)?,
            w2: f("ffn.w2", &self.ffn.w2)?,
            b2: f("ffn.b2", &self.ffn.b2)?,
        };
        Ok(BlockWeights { norm1, attn: AttnWeights { w_q, w_k, w_v, gate, w_u1, w_u2, lpe }, norm2, ffn })
    }

    /// Visits parameters in [`BlockWeights::named`] order.
    pub fn map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Q) -> BlockWeights<Q> {
        self.try_map::<Q, std::convert::Infallible>(|n, p| Ok(f(n, p))).unwrap_or_else(|e| match e {})
    }
}

/// Dimensions of one SDA block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub dim: usize,
    pub heads: usize,
    pub rank: usize,
}

impl LayerDims {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        Self::with_rank(dim, heads, (dim / 4).max(1))
    }

    pub fn with_rank(dim: usize, heads: usize, rank: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        if (dim / heads) % 4 != 0 {
            return Err(Error::Config(format!("head dim {} must be a multiple of 4", dim / heads)));
        }
        if rank == 0 || rank >= dim {
            return Err(Error::Config(format!("gate rank {rank} must lie in [1, {dim})")));
        }
        Ok(Self { dim, heads, rank })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Closed-form parameter count of one block.
    pub fn param_count(&self, path: AttentionPath) -> usize {
        let (d, n, r) = (self.dim, self.heads, self.rank);
        let gates = match path {
            AttentionPath::Full => d * n,
            AttentionPath::Decomposed => 2 * d * n,
        };
        let attn = 3 * d * d + gates + 2 * d * r + LPE_KERNEL * LPE_KERNEL * d;
        let ffn = 2 * FFN_RATIO * d * d + FFN_RATIO * d + d;
        attn + ffn + 4 * d
    }
}

impl<T: Scalar> SdaLayerParams<T> {
    /// Truncated-normal projections, zero gate projections and biases,
    /// unit norm scales.
    pub fn init(dims: LayerDims, path: AttentionPath, rng: &mut impl Rng) -> Self {
        let (d, n, r) = (dims.dim, dims.heads, dims.rank);
        let h = FFN_RATIO * d;
        let mut tn = |shape: Vec<usize>| Tensor::<T>::trunc_normal(shape, INIT_STD, rng);
        let w_q = tn(vec![d, d]);
        let w_k = tn(vec![d, d]);
        let w_v = tn(vec![d, d]);
        let w_u1 = tn(vec![d, r]);
        let w_u2 = tn(vec![r, d]);
        let lpe = tn(vec![LPE_KERNEL, LPE_KERNEL, d]);
        let w1 = tn(vec![d, h]);
        let w2 = tn(vec![h, d]);
        let gate = match path {
            AttentionPath::Full => GateWeights::Full { w_g: Tensor::zeros(vec![d, n]) },
            AttentionPath::Decomposed => GateWeights::Decomposed {
                w_gh: Tensor::zeros(vec![d, n]),
                w_gw: Tensor::zeros(vec![d, n]),
            },
        };
        BlockWeights {
            norm1: NormWeights { scale: Tensor::ones(vec![d]), shift: Tensor::zeros(vec![d]) },
            attn: AttnWeights { w_q, w_k, w_v, gate, w_u1, w_u2, lpe },
            norm2: NormWeights { scale: Tensor::ones(vec![d]), shift: Tensor::zeros(vec![d]) },
            ffn: FfnWeights { w1, b1: Tensor::zeros(vec![h]), w2, b2: Tensor::zeros(vec![d]) },
        }
    }

    pub fn dims(&self) -> Result<LayerDims> {
        let d = self.attn.w_q.shape()[0];
        let n = match &self.attn.gate {
            GateWeights::Full { w_g } => w_g.shape()[1],
            GateWeights::Decomposed { w_gh, .. } => w_gh.shape()[1],
        };
        LayerDims::with_rank(d, n, self.attn.w_u1.shape()[1])
    }

    /// Places every tensor on the tape as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BlockWeights<Var> {
        self.map(|_, t| g.param(t.clone()))
    }
}

/// Per-layer constants: grid, rotary tables and decay settings.
#[derive(Clone, Debug)]
pub struct LayerContext<T: Scalar> {
    pub grid: Grid,
    pub heads: usize,
    pub alpha: T,
    /// Per-head rates for the fixed decay.
    pub lambdas: Vec<T>,
    pub variant: DecayVariant,
    rope: Option<RopeSet<T>>,
}

#[derive(Clone, Debug)]
struct RopeSet<T: Scalar> {
    both: Arc<RopeTable<T>>,
    height: Arc<RopeTable<T>>,
    width: Arc<RopeTable<T>>,
}

impl<T: Scalar> LayerContext<T> {
    pub fn new(grid: Grid, dims: LayerDims, variant: DecayVariant, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        let dk = dims.head_dim();
        let rope = RopeSet {
            both: Arc::new(RopeTable::new(grid, dk, RopeAxes::Both)?),
            height: Arc::new(RopeTable::new(grid, dk, RopeAxes::HeightOnly)?),
            width: Arc::new(RopeTable::new(grid, dk, RopeAxes::WidthOnly)?),
        };
        Ok(Self {
            grid,
            heads: dims.heads,
            alpha: T::of(alpha),
            lambdas: default_lambdas(dims.heads).into_iter().map(T::of).collect(),
            variant,
            rope: Some(rope),
        })
    }

    pub fn without_rope(mut self) -> Self {
        self.rope = None;
        self
    }

    pub fn has_rope(&self) -> bool {
        self.rope.is_some()
    }
}

/// Attention probabilities recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttnTrace {
    /// Softmax outputs: `[B, N, L, L]` for the full path, or the width
    /// `[B, N, H, W, W]` then height `[B, N, W, H, H]` weights.
    pub weights: Vec<Var>,
}

/// `softmax(q kᵀ / √d_k + mask)`, over the last two axes.
pub fn attention_weights<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, mask: Option<Var>) -> Result<Var> {
    let dk = *g.try_value(q)?.shape().last().unwrap_or(&1);
    let scores = g.matmul_t(q, k)?;
    let mut scores = g.scale(scores, T::one() / T::of(dk as f64).sqrt())?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    g.softmax_rows(scores)
}

pub fn attention_core<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let p = attention_weights(g, q, k, mask)?;
    g.matmul(p, v)
}

fn check_input<T: Scalar>(g: &Graph<T>, x: Var, ctx: &LayerContext<T>, dim: usize) -> Result<usize> {
    let shape = g.try_value(x)?.shape();
    match shape {
        &[b, h, w, d] if h == ctx.grid.height() && w == ctx.grid.width() && d == dim => Ok(b),
        _ => Err(Error::shape("sda_forward", shape, &[0, ctx.grid.height(), ctx.grid.width(), dim])),
    }
}

fn weight_dim<T: Scalar>(g: &Graph<T>, w: &AttnWeights<Var>) -> Result<usize> {
    Ok(g.try_value(w.w_q)?.shape()[0])
}

/// `[B, L, D] -> [B, N, L, d_k]`.
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, b: usize, l: usize, n: usize, dk: usize) -> Result<Var> {
    let r = g.reshape(x, &[b, l, n, dk])?;
    g.permute(r, &[0, 2, 1, 3])
}

fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, b: usize, l: usize, d: usize) -> Result<Var> {
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, l, d])
}

struct Projected {
    b: usize,
    l: usize,
    d: usize,
    dk: usize,
    x_flat: Var,
    q: Var,
    k: Var,
    v: Var,
    v_flat: Var,
}

fn project<T: Scalar>(g: &mut Graph<T>, x: Var, w: &AttnWeights<Var>, ctx: &LayerContext<T>) -> Result<Projected> {
    let d = weight_dim(g, w)?;
    let b = check_input(g, x, ctx, d)?;
    let n = ctx.heads;
    if d % n != 0 {
        return Err(Error::Config(format!("dim {d} is not divisible by {n} heads")));
    }
    let (l, dk) = (ctx.grid.len(), d / n);
    let x_flat = g.reshape(x, &[b, l, d])?;
    let q = g.matmul(x_flat, w.w_q)?;
    let k = g.matmul(x_flat, w.w_k)?;
    let v_flat = g.matmul(x_flat, w.w_v)?;
    let q = split_heads(g, q, b, l, n, dk)?;
    let k = split_heads(g, k, b, l, n, dk)?;
    let v = split_heads(g, v_flat, b, l, n, dk)?;
    Ok(Projected { b, l, d, dk, x_flat, q, k, v, v_flat })
}

/// `U ⊙ (attn + LPE(V))`, reshaped back onto the grid.
fn finish<T: Scalar>(g: &mut Graph<T>, p: &Projected, attn: Var, w: &AttnWeights<Var>, ctx: &LayerContext<T>) -> Result<Var> {
    let (gh, gw) = (ctx.grid.height(), ctx.grid.width());
    let v_grid = g.reshape(p.v_flat, &[p.b, gh, gw, p.d])?;
    let lpe = g.depthwise_conv2d(v_grid, w.lpe)?;
    let lpe = g.reshape(lpe, &[p.b, p.l, p.d])?;
    let u = g.matmul(p.x_flat, w.w_u1)?;
    let u = g.sigmoid(u)?;
    let u = g.matmul(u, w.w_u2)?;
    let sum = g.add(attn, lpe)?;
    let out = g.mul(u, sum)?;
    g.reshape(out, &[p.b, gh, gw, p.d])
}

fn check_mask<T: Scalar>(g: &Graph<T>, mask: Var) -> Result<()> {
    if let Some(v) = g.try_value(mask)?.data().iter().find(|v| **v > T::zero()) {
        return Err(Error::invalid("sda_forward_full", format!("decay mask entries must be <= 0, found {v}")));
    }
    Ok(())
}

/// Full-path layer with an externally supplied mask `[B|1, N, L, L]`.
pub fn sda_forward_full_traced<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: &AttnWeights<Var>,
    mask: Option<Var>,
    ctx: &LayerContext<T>,
    trace: &mut AttnTrace,
) -> Result<Var> {
    if let Some(m) = mask {
        check_mask(g, m)?;
    }
    let p = project(g, x, w, ctx)?;
    let (q, k) = match &ctx.rope {
        Some(r) => (apply_rope(g, p.q, &r.both)?, apply_rope(g, p.k, &r.both)?),
        None => (p.q, p.k),
    };
    let probs = attention_weights(g, q, k, mask)?;
    trace.weights.push(probs);
    let heads = g.matmul(probs, p.v)?;
    let attn = merge_heads(g, heads, p.b, p.l, p.d)?;
    finish(g, &p, attn, w, ctx)
}

pub fn sda_forward_full<T: Scalar>(g: &mut Graph<T>, x: Var, w: &AttnWeights<Var>, mask: Option<Var>, ctx: &LayerContext<T>) -> Result<Var> {
    sda_forward_full_traced(g, x, w, mask, ctx, &mut AttnTrace::default())
}

/// Row attention over width, then column attention over height, each with
/// its own per-axis mask built from the layer input.
pub fn sda_forward_decomposed_traced<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: &AttnWeights<Var>,
    ctx: &LayerContext<T>,
    trace: &mut AttnTrace,
) -> Result<Var> {
    let GateWeights::Decomposed { w_gh, w_gw } = w.gate else {
        return Err(Error::invalid("sda_forward_decomposed", "layer carries full-path gate weights"));
    };
    let p = project(g, x, w, ctx)?;
    let (gh, gw, n) = (ctx.grid.height(), ctx.grid.width(), ctx.heads);
    let (b, dk) = (p.b, p.dk);

    let fw = g.matmul(p.x_flat, w_gw)?;
    let gates_w = g.log_sigmoid(fw)?;
    let mask_w = decay::axis_mask_on(g, gates_w, ctx.grid, Axis::Width)?;
    let fh = g.matmul(p.x_flat, w_gh)?;
    let gates_h = g.log_sigmoid(fh)?;
    let mask_h = decay::axis_mask_on(g, gates_h, ctx.grid, Axis::Height)?;

    let ((qw, kw), (qh, kh)) = match &ctx.rope {
        Some(r) => (
            (apply_rope(g, p.q, &r.width)?, apply_rope(g, p.k, &r.width)?),
            (apply_rope(g, p.q, &r.height)?, apply_rope(g, p.k, &r.height)?),
        ),
        None => ((p.q, p.k), (p.q, p.k)),
    };
    let rows = [b, n, gh, gw, dk];
    let swap = [0, 1, 3, 2, 4];

    let qw = g.reshape(qw, &rows)?;
    let kw = g.reshape(kw, &rows)?;
    let v = g.reshape(p.v, &rows)?;
    let pw = attention_weights(g, qw, kw, Some(mask_w))?;
    trace.weights.push(pw);
    let y = g.matmul(pw, v)?;

    let qh = g.reshape(qh, &rows)?;
    let qh = g.permute(qh, &swap)?;
    let kh = g.reshape(kh, &rows)?;
    let kh = g.permute(kh, &swap)?;
    let yt = g.permute(y, &swap)?;
    let ph = attention_weights(g, qh, kh, Some(mask_h))?;
    trace.weights.push(ph);
    let o = g.matmul(ph, yt)?;
    let o = g.permute(o, &swap)?;
    let o = g.reshape(o, &[b, n, p.l, dk])?;
    let attn = merge_heads(g, o, b, p.l, p.d)?;
    finish(g, &p, attn, w, ctx)
}

pub fn sda_forward_decomposed<T: Scalar>(g: &mut Graph<T>, x: Var, w: &AttnWeights<Var>, ctx: &LayerContext<T>) -> Result<Var> {
    sda_forward_decomposed_traced(g, x, w, ctx, &mut AttnTrace::default())
}

/// Builds the full-path decay bias for `ctx.variant` from the layer input.
pub fn build_mask<T: Scalar>(g: &mut Graph<T>, x: Var, w: &AttnWeights<Var>, ctx: &LayerContext<T>) -> Result<Option<Var>> {
    let variant = ctx.variant;
    if matches!(variant, DecayVariant::None) {
        return Ok(None);
    }
    if matches!(variant, DecayVariant::Fixed) {
        let lambdas = Tensor::new(vec![ctx.lambdas.len()], ctx.lambdas.clone())?;
        let mask = decay::fixed_spatial_mask(ctx.grid, &lambdas)?;
        g.counters_mut().full_masks += 1;
        return Ok(Some(g.constant(mask.bias)));
    }
    let GateWeights::Full { w_g } = w.gate else {
        return Err(Error::invalid("build_mask", "full-path mask requested from decomposed gate weights"));
    };
    let d = weight_dim(g, w)?;
    let b = check_input(g, x, ctx, d)?;
    let x_flat = g.reshape(x, &[b, ctx.grid.len(), d])?;
    let f = g.matmul(x_flat, w_g)?;
    let gates = g.log_sigmoid(f)?;
    let mask = match variant {
        DecayVariant::Cag => decay::fused_mask_on(g, gates, ctx.grid, ctx.alpha)?,
        DecayVariant::OneD => decay::mask_1d_on(g, gates, Direction::Forward)?,
        DecayVariant::Bidirectional => decay::mask_1d_on(g, gates, Direction::Bidirectional)?,
        _ => return Err(Error::invalid("build_mask", format!("variant {} has no full-path mask", variant.name()))),
    };
    Ok(Some(mask))
}

/// Dispatches on the layer's gate weights: decomposed weights take the
/// separable path, full weights build the mask for `ctx.variant`.
pub fn sda_forward_traced<T: Scalar>(g: &mut Graph<T>, x: Var, w: &AttnWeights<Var>, ctx: &LayerContext<T>, trace: &mut AttnTrace) -> Result<Var> {
    match w.gate.path() {
        AttentionPath::Decomposed => sda_forward_decomposed_traced(g, x, w, ctx, trace),
        AttentionPath::Full => {
            let mask = build_mask(g, x, w, ctx)?;
            sda_forward_full_traced(g, x, w, mask, ctx, trace)
        }
    }
}

pub fn sda_forward<T: Scalar>(g: &mut Graph<T>, x: Var, w: &AttnWeights<Var>, ctx: &LayerContext<T>) -> Result<Var> {
    sda_forward_traced(g, x, w, ctx, &mut AttnTrace::default())
}

/// `GELU(x W1 + b1) W2 + b2` over the last axis.
pub fn ffn_forward<T: Scalar>(g: &mut Graph<T>, x: Var, w: &FfnWeights<Var>) -> Result<Var> {
    let h = g.matmul(x, w.w1)?;
    let h = g.add(h, w.b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, w.w2)?;
    g.add(o, w.b2)
}

pub fn layer_norm_affine<T: Scalar>(g: &mut Graph<T>, x: Var, w: &NormWeights<Var>) -> Result<Var> {
    let n = g.layer_norm(x, T::of(NORM_EPS))?;
    let n = g.mul(n, w.scale)?;
    g.add(n, w.shift)
}

pub fn block_forward_traced<T: Scalar>(g: &mut Graph<T>, x: Var, w: &BlockWeights<Var>, ctx: &LayerContext<T>, trace: &mut AttnTrace) -> Result<Var> {
    let n1 = layer_norm_affine(g, x, &w.norm1)?;
    let a = sda_forward_traced(g, n1, &w.attn, ctx, trace)?;
    let x1 = g.add(x, a)?;
    let n2 = layer_norm_affine(g, x1, &w.norm2)?;
    let f = ffn_forward(g, n2, &w.ffn)?;
    g.add(x1, f)
}

pub fn block_forward<T: Scalar>(g: &mut Graph<T>, x: Var, w: &BlockWeights<Var>, ctx: &LayerContext<T>) -> Result<Var> {
    block_forward_traced(g, x, w, ctx, &mut AttnTrace::default())
}
