//! Ready-made finite-difference suites at three scopes: single ops, one
//! SDA layer, and a whole model step.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check, probe_loss, GradCheckConfig, InputReport};
use crate::autodiff::{Graph, Var};
use crate::decay::{self, Axis, DecayVariant, Direction, Grid};
use crate::error::Result;
use crate::model::{build_model, cross_entropy, Architecture, ModelConfig};
use crate::rope::{apply_rope, RopeAxes, RopeTable};
use crate::sda::{self, AttentionPath, LayerContext, LayerDims, SdaLayerParams};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Layer,
    Model,
}

impl Scope {
    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Op => OP_TOLERANCE,
            Scope::Layer => LAYER_TOLERANCE,
            Scope::Model => MODEL_TOLERANCE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::Op => "op",
            Scope::Layer => "layer",
            Scope::Model => "model",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "layer" => Ok(Scope::Layer),
            "model" => Ok(Scope::Model),
            _ => Err(crate::error::Error::Config(format!("unknown gradcheck scope {s:?} (expected op, layer or model)"))),
        }
    }
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<InputReport>> {
    match scope {
        Scope::Op => op_suite(seed),
        Scope::Layer => layer_suite(seed),
        Scope::Model => model_suite(seed),
    }
}

fn prefixed(group: &str, reports: Vec<InputReport>) -> Vec<InputReport> {
    reports.into_iter().map(|mut r| {
        r.name = format!("{group}/{}", r.name);
        r
    }).collect()
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn case(name: &'static str, inputs: Vec<(&'static str, Tensor<f64>)>, f: OpFn) -> (&'static str, Vec<(String, Tensor<f64>)>, OpFn) {
    (name, inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect(), f)
}

/// Every differentiable primitive, each behind a weighted-sum probe loss.
pub fn op_suite(seed: u64) -> Result<Vec<InputReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape.to_vec(), 1.0, &mut rng);
    let away_from_zero = r(&[3, 4]).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    // gelu' vanishes near -0.75 and in the far negative tail; there the
    // relative error measures only finite-difference truncation
    let off_stationary = r(&[3, 4]).scale(1.5).map(|v| if (v + 0.7518).abs() < 0.15 { v + 0.4 } else { v.max(-2.5) });
    let gates = r(&[2, 6, 2]).map(|v| -(v.abs() + 0.1));
    let grid = Grid::new(2, 3)?;
    let table = Arc::new(RopeTable::<f64>::new(grid, 8, RopeAxes::Both)?);
    let cases = vec![
        case("add", vec![("a", r(&[2, 3, 4])), ("b", r(&[3, 1]))], Box::new(|g, v| g.add(v[0], v[1]))),
        case("sub", vec![("a", r(&[2, 3, 4])), ("b", r(&[4]))], Box::new(|g, v| g.sub(v[0], v[1]))),
        case("mul", vec![("a", r(&[2, 3, 4])), ("b", r(&[1, 3, 1]))], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("scale", vec![("a", r(&[3, 4]))], Box::new(|g, v| g.scale(v[0], -1.7))),
        case("neg", vec![("a", r(&[3, 4]))], Box::new(|g, v| g.neg(v[0]))),
        case("abs", vec![("a", away_from_zero)], Box::new(|g, v| g.abs(v[0]))),
        case("sigmoid", vec![("a", r(&[3, 4]))], Box::new(|g, v| g.sigmoid(v[0]))),
        case("log_sigmoid", vec![("a", r(&[3, 4]).scale(3.0))], Box::new(|g, v| g.log_sigmoid(v[0]))),
        case("gelu", vec![("a", off_stationary)], Box::new(|g, v| g.gelu(v[0]))),
        case("matmul", vec![("a", r(&[2, 3, 4])), ("b", r(&[4, 5]))], Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("matmul_batched", vec![("a", r(&[2, 1, 3, 4])), ("b", r(&[3, 4, 2]))], Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("matmul_t", vec![("a", r(&[2, 3, 4])), ("b", r(&[2, 5, 4]))], Box::new(|g, v| g.matmul_t(v[0], v[1]))),
        case("softmax", vec![("a", r(&[3, 5]))], Box::new(|g, v| g.softmax_rows(v[0]))),
        case("log_softmax", vec![("a", r(&[3, 5]))], Box::new(|g, v| g.log_softmax_rows(v[0]))),
        case("sum", vec![("a", r(&[3, 4]))], Box::new(|g, v| { let s = g.sum(v[0])?; g.mul(s, s) })),
        case("mean", vec![("a", r(&[3, 4]))], Box::new(|g, v| { let s = g.mean(v[0])?; g.mul(s, s) })),
        case("sum_axis", vec![("a", r(&[2, 3, 4]))], Box::new(|g, v| g.sum_axis(v[0], 1))),
        case("mean_axis", vec![("a", r(&[2, 3, 4]))], Box::new(|g, v| g.mean_axis(v[0], 2))),
        case("reshape", vec![("a", r(&[2, 6]))], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        case("permute", vec![("a", r(&[2, 3, 4]))], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        case("depthwise_conv2d", vec![("x", r(&[2, 3, 4, 2])), ("k", r(&[3, 3, 2]))], Box::new(|g, v| g.depthwise_conv2d(v[0], v[1]))),
        case("layer_norm", vec![("a", r(&[3, 6]))], Box::new(|g, v| g.layer_norm(v[0], 1e-5))),
        case("rope", vec![("x", r(&[1, 2, 6, 8]))], Box::new(move |g, v| apply_rope(g, v[0], &table))),
        case("fused_mask", vec![("gates", gates.clone())], Box::new(move |g, v| decay::fused_mask_on(g, v[0], grid, 0.3))),
        case("mask_1d", vec![("gates", gates.clone())], Box::new(|g, v| decay::mask_1d_on(g, v[0], Direction::Forward))),
        case("mask_bidir", vec![("gates", gates.clone())], Box::new(|g, v| decay::mask_1d_on(g, v[0], Direction::Bidirectional))),
        case("axis_mask_width", vec![("gates", gates.clone())], Box::new(move |g, v| decay::axis_mask_on(g, v[0], grid, Axis::Width))),
        case("axis_mask_height", vec![("gates", gates)], Box::new(move |g, v| decay::axis_mask_on(g, v[0], grid, Axis::Height))),
    ];
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();
    for (k, (name, inputs, f)) in cases.into_iter().enumerate() {
        let probe = seed.wrapping_add(k as u64);
        let reports = check(&inputs, |g, v| { let y = f(g, v)?; probe_loss(g, y, probe) }, &cfg)?;
        out.extend(prefixed(name, reports));
    }
    Ok(out)
}

fn widen(p: &SdaLayerParams<f64>, rng: &mut ChaCha8Rng) -> SdaLayerParams<f64> {
    // init weights are tiny; spread them so no branch is numerically silent
    p.map(|name, t| match name {
        "norm1.scale" | "norm2.scale" => t.map(|v| v + 0.0),
        "attn.w_g" | "attn.w_gh" | "attn.w_gw" => Tensor::randn(t.shape().to_vec(), 0.8, rng),
        _ => Tensor::randn(t.shape().to_vec(), 0.4, rng),
    })
}

/// One SDA layer at `D = 8`, two heads, on a 3×3 grid, for both paths;
/// the loss is the plain sum of the layer output.
pub fn layer_suite(seed: u64) -> Result<Vec<InputReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = LayerDims::new(8, 2)?;
    let grid = Grid::new(3, 3)?;
    let mut out = Vec::new();
    for (group, path, variant) in [("layer.full", AttentionPath::Full, DecayVariant::Cag), ("layer.decomposed", AttentionPath::Decomposed, DecayVariant::Decomposed)] {
        let init = SdaLayerParams::<f64>::init(dims, path, &mut rng);
        let p = widen(&init, &mut rng);
        let ctx = LayerContext::<f64>::new(grid, dims, variant, 0.3)?;
        let named = p.named();
        let attn: Vec<(String, Tensor<f64>)> = named.iter().filter(|(n, _)| n.starts_with("attn.")).map(|(n, t)| (n.to_string(), (*t).clone())).collect();
        let mut inputs = attn;
        inputs.push(("x".into(), Tensor::randn(vec![1, 3, 3, 8], 1.0, &mut rng)));
        let reports = check(
            &inputs,
            |g, v| {
                let mut it = v.iter();
                let w = p.map(|name, t| if name.starts_with("attn.") { *it.next().unwrap() } else { g.constant(t.clone()) });
                let x = *it.next().unwrap();
                let y = sda::sda_forward(g, x, &w.attn, &ctx)?;
                g.sum(y)
            },
            &GradCheckConfig::default(),
        )?;
        out.extend(prefixed(group, reports));
    }
    Ok(out)
}

/// Configuration used by [`model_suite`]: four small stages whose grids
/// shrink 8×8, 4×4, 2×2, 1×1.
pub fn model_suite_config() -> ModelConfig {
    ModelConfig {
        arch: Architecture::Hierarchical,
        decay: DecayVariant::Cag,
        stage_depths: vec![1, 1, 1, 1],
        stage_dims: vec![8, 8, 16, 16],
        stage_heads: vec![2, 2, 2, 2],
        patch_size: 2,
        image_size: (16, 16),
        ..ModelConfig::hierarchical()
    }
}

/// Cross-entropy of one batch through a whole model, with every parameter
/// probed at a few strided entries.
pub fn model_suite(seed: u64) -> Result<Vec<InputReport>> {
    let config = model_suite_config();
    let (store, model) = build_model::<f64>(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let inputs: Vec<(String, Tensor<f64>)> = store
        .iter()
        .map(|(_, name, t)| {
            let spread = if name.ends_with(".scale") {
                t.map(|v| v + 0.0).add(&Tensor::randn(t.shape().to_vec(), 0.1, &mut rng)).expect("same shape")
            } else {
                Tensor::randn(t.shape().to_vec(), 0.3, &mut rng)
            };
            (name.to_string(), spread)
        })
        .collect();
    let images = Tensor::<f64>::randn(vec![2, 16, 16, 1], 1.0, &mut rng);
    let labels = vec![1, 3];
    let cfg = GradCheckConfig { max_entries: Some(6), ..GradCheckConfig::default() };
    let reports = check(
        &inputs,
        |g, v| {
            let x = g.constant(images.clone());
            let out = model.forward(g, v, x)?;
            cross_entropy(g, out.logits, &labels)
        },
        &cfg,
    )?;
    Ok(prefixed("model", reports))
}
