//! Hierarchical and plain classifiers assembled from SDA blocks.

mod checkpoint;
mod config;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Architecture, ModelConfig, DECOMPOSED_STAGES};
pub use optim::{AdamWConfig, Optimizer};
pub use params::{ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Counters, Graph, Var};
use crate::decay::{DecayVariant, Grid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sda::{self, AttentionPath, BlockWeights, GateWeights, LayerContext, NormWeights, SdaLayerParams, INIT_STD};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Stage<T: Scalar> {
    pub grid: Grid,
    pub path: AttentionPath,
    /// 2×2 stride-2 patch merge `(weight, bias)` into this stage.
    pub downsample: Option<(ParamId, ParamId)>,
    pub blocks: Vec<BlockWeights<ParamId>>,
    pub ctx: LayerContext<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    patch: (ParamId, ParamId),
    stages: Vec<Stage<T>>,
    norm: NormWeights<ParamId>,
    head: (ParamId, ParamId),
}

/// Logits plus per-stage mask instrumentation.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub stage_counters: Vec<Counters>,
}

#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    /// `[B, H, W, C]`
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Builds and initializes a model; identical seeds give identical stores.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, Model<T>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (p, c) = (config.patch_size, config.in_channels);
    let d0 = config.stage_dims[0];
    let patch = (
        store.insert("patch.weight", Tensor::trunc_normal(vec![p * p * c, d0], INIT_STD, &mut rng))?,
        store.insert("patch.bias", Tensor::zeros(vec![d0]))?,
    );
    let mut stages = Vec::with_capacity(config.stages());
    for s in 0..config.stages() {
        let d = config.stage_dims[s];
        let downsample = if s == 0 {
            None
        } else {
            let prev = config.stage_dims[s - 1];
            Some((
                store.insert(format!("stage{s}.down.weight"), Tensor::trunc_normal(vec![4 * prev, d], INIT_STD, &mut rng))?,
                store.insert(format!("stage{s}.down.bias"), Tensor::zeros(vec![d]))?,
            ))
        };
        let dims = config.layer_dims(s)?;
        let path = config.stage_path(s);
        let grid = config.stage_grid(s)?;
        let mut blocks = Vec::with_capacity(config.stage_depths[s]);
        for b in 0..config.stage_depths[s] {
            let init = SdaLayerParams::<T>::init(dims, path, &mut rng);
            let ids = init.try_map(|name, t| store.insert(format!("stage{s}.block{b}.{name}"), t.clone()))?;
            blocks.push(ids);
        }
        let mut ctx = LayerContext::new(grid, dims, config.decay, config.alpha)?;
        if !config.rope {
            ctx = ctx.without_rope();
        }
        stages.push(Stage { grid, path, downsample, blocks, ctx });
    }
    let last = *config.stage_dims.last().unwrap_or(&d0);
    let norm = NormWeights {
        scale: store.insert("norm.scale", Tensor::ones(vec![last]))?,
        shift: store.insert("norm.shift", Tensor::zeros(vec![last]))?,
    };
    let head = (
        store.insert("head.weight", Tensor::trunc_normal(vec![last, config.num_classes], INIT_STD, &mut rng))?,
        store.insert("head.bias", Tensor::zeros(vec![config.num_classes]))?,
    );
    Ok((store, Model { config: config.clone(), patch, stages, norm, head }))
}

/// Non-overlapping `p×p` patches `[B,H,W,C] -> [B,H/p,W/p,p·p·C]` followed
/// by a linear map, i.e. a stride-`p` convolution.
fn patch_conv<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize, w: Var, b: Var) -> Result<Var> {
    let shape = g.try_value(x)?.shape().to_vec();
    let [n, h, wd, c] = shape[..] else {
        return Err(Error::shape("patch_conv", &shape, &[0, 0, 0, 0]));
    };
    if h % p != 0 || wd % p != 0 {
        return Err(Error::invalid("patch_conv", format!("{h}x{wd} is not divisible by {p}")));
    }
    let (oh, ow) = (h / p, wd / p);
    let r = g.reshape(x, &[n, oh, p, ow, p, c])?;
    let r = g.permute(r, &[0, 1, 3, 2, 4, 5])?;
    let r = g.reshape(r, &[n, oh * ow, p * p * c])?;
    let y = g.matmul(r, w)?;
    let y = g.add(y, b)?;
    let d = g.try_value(y)?.shape()[2];
    g.reshape(y, &[n, oh, ow, d])
}

fn counter_delta(after: Counters, before: Counters) -> Counters {
    Counters { full_masks: after.full_masks - before.full_masks, axis_masks: after.axis_masks - before.axis_masks }
}

fn in_context<T>(r: Result<T>, place: impl FnOnce() -> String) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op, node } => Error::NonFinite { op: format!("{} / {op}", place()), node },
        other => other,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage<T>] {
        &mut self.stages
    }

    /// Logits `[B, classes]` for images `[B, H, W, C]`; `vars` comes from
    /// [`ParamStore::bind`].
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], images: Var) -> Result<ForwardOutput> {
        let shape = g.try_value(images)?.shape().to_vec();
        let (h, w) = self.config.image_size;
        if shape.len() != 4 || shape[1] != h || shape[2] != w || shape[3] != self.config.in_channels {
            return Err(Error::shape("model_forward", &shape, &[0, h, w, self.config.in_channels]));
        }
        let v = |id: ParamId| vars[id.index()];
        let mut x = in_context(patch_conv(g, images, self.config.patch_size, v(self.patch.0), v(self.patch.1)), || "patch".into())?;
        let mut stage_counters = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let before = g.counters();
            if let Some((dw, db)) = stage.downsample {
                x = in_context(patch_conv(g, x, 2, v(dw), v(db)), || format!("stage{s}.down"))?;
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                let bw = block.map(|_, id| v(*id));
                x = in_context(sda::block_forward(g, x, &bw, &stage.ctx), || format!("stage{s}.block{b}"))?;
            }
            stage_counters.push(counter_delta(g.counters(), before));
        }
        let logits = in_context(self.head_forward(g, x, &v), || "head".into())?;
        Ok(ForwardOutput { logits, stage_counters })
    }

    fn head_forward(&self, g: &mut Graph<T>, x: Var, v: &impl Fn(ParamId) -> Var) -> Result<Var> {
        let shape = g.try_value(x)?.shape().to_vec();
        let norm = NormWeights { scale: v(self.norm.scale), shift: v(self.norm.shift) };
        let x = sda::layer_norm_affine(g, x, &norm)?;
        let x = g.reshape(x, &[shape[0], shape[1] * shape[2], shape[3]])?;
        let pooled = g.mean_axis(x, 1)?;
        let y = g.matmul(pooled, v(self.head.0))?;
        g.add(y, v(self.head.1))
    }

    /// Inference on plain tensors.
    pub fn predict(&self, params: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|(_, _, t)| g.constant(t.clone())).collect();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.value(out.logits).clone())
    }

    /// Parameters whose gradient is identically zero for this
    /// configuration: gate projections the variant never reads, and query,
    /// key and gate weights of attention axes with a single key.
    pub fn inactive_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        let reads_gate = matches!(self.config.decay, DecayVariant::Cag | DecayVariant::OneD | DecayVariant::Bidirectional);
        for stage in &self.stages {
            let (h, w) = (stage.grid.height(), stage.grid.width());
            for block in &stage.blocks {
                let a = &block.attn;
                match a.gate {
                    GateWeights::Full { w_g } => {
                        if !reads_gate || stage.grid.len() == 1 {
                            out.push(w_g);
                        }
                        if stage.grid.len() == 1 {
                            out.extend([a.w_q, a.w_k]);
                        }
                    }
                    GateWeights::Decomposed { w_gh, w_gw } => {
                        if h == 1 {
                            out.push(w_gh);
                        }
                        if w == 1 {
                            out.push(w_gw);
                        }
                        if h == 1 && w == 1 {
                            out.extend([a.w_q, a.w_k]);
                        }
                    }
                }
            }
        }
        out.sort();
        out
    }
}

/// Mean cross-entropy of `logits: [B, K]` against integer labels.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.try_value(logits)?.shape().to_vec();
    let [b, k] = shape[..] else {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len(), 0]));
    };
    if b != labels.len() || labels.iter().any(|&l| l >= k) {
        return Err(Error::invalid("cross_entropy", format!("{} labels for logits {:?}", labels.len(), shape)));
    }
    let mut target = Tensor::zeros(vec![b, k]);
    for (i, &l) in labels.iter().enumerate() {
        target.data_mut()[i * k + l] = -T::one() / T::of(b as f64);
    }
    let logp = g.log_softmax_rows(logits)?;
    let t = g.constant(target);
    let picked = g.mul(logp, t)?;
    g.sum(picked)
}

/// Loss and gradients for one batch, without updating parameters.
pub fn compute_gradients<T: Scalar>(model: &Model<T>, params: &mut ParamStore<T>, batch: &Batch<T>) -> Result<T> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.constant(batch.images.clone());
    let out = model.forward(&mut g, &vars, x)?;
    let loss = cross_entropy(&mut g, out.logits, &batch.labels)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    params.store_grads(&g, &grads, &vars)?;
    Ok(value)
}

/// Forward, backward and one optimizer update; returns the batch loss.
pub fn train_step<T: Scalar>(model: &Model<T>, params: &mut ParamStore<T>, batch: &Batch<T>, optimizer: &mut Optimizer<T>) -> Result<T> {
    let loss = compute_gradients(model, params, batch)?;
    optimizer.update(params)?;
    Ok(loss)
}

/// Mean loss and accuracy over `images` in chunks of `batch_size`.
pub fn evaluate<T: Scalar>(model: &Model<T>, params: &ParamStore<T>, images: &Tensor<T>, labels: &[usize], batch_size: usize) -> Result<(f64, f64)> {
    let n = labels.len();
    if n == 0 || images.shape().first() != Some(&n) {
        return Err(Error::invalid("evaluate", format!("{n} labels for images {:?}", images.shape())));
    }
    let per = images.numel() / n;
    let mut shape = images.shape().to_vec();
    let (mut loss, mut correct) = (0.0, 0usize);
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(n);
        shape[0] = end - start;
        let chunk = Tensor::new(shape.clone(), images.data()[start * per..end * per].to_vec())?;
        let logits = model.predict(params, &chunk)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels[start..end]) {
            let top = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = top.as_f64() + row.iter().map(|v| (v.as_f64() - top.as_f64()).exp()).sum::<f64>().ln();
            loss += lse - row[label].as_f64();
            let arg = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            correct += usize::from(arg == label);
        }
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}
