//! Flat `key = value` run configuration. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use sdt_core::decay::DecayVariant;
use sdt_core::model::{AdamWConfig, Architecture, ModelConfig};

use crate::data::SyntheticTask;
use crate::error::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub seed: u64,
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub precision: Precision,
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "arch",
    "decay",
    "alpha",
    "stage_depths",
    "stage_dims",
    "stage_heads",
    "patch_size",
    "gate_rank",
    "rope",
    "image_size",
    "num_classes",
    "noise",
    "min_separation",
    "stride",
    "seed",
    "data_seed",
    "epochs",
    "batch_size",
    "lr",
    "min_lr",
    "warmup_epochs",
    "weight_decay",
    "train_samples",
    "test_samples",
    "precision",
];

impl Default for RunConfig {
    /// The desk-scale ablation setup: one motif per 8×8 patch on a 4×4
    /// token grid, noisy enough that no variant saturates.
    fn default() -> Self {
        let task = SyntheticTask { noise: 0.8, stride: 8, ..SyntheticTask::default() };
        Self {
            model: ModelConfig {
                arch: Architecture::Plain,
                decay: DecayVariant::Cag,
                alpha: 0.1,
                stage_depths: vec![2],
                stage_dims: vec![64],
                stage_heads: vec![4],
                patch_size: 8,
                image_size: (task.size, task.size),
                in_channels: 1,
                num_classes: task.num_classes,
                gate_rank: None,
                rope: true,
            },
            task,
            seed: 0,
            data_seed: 1234,
            epochs: 20,
            batch_size: 32,
            lr: 3e-3,
            min_lr: 1e-5,
            warmup_epochs: 1,
            weight_decay: 0.05,
            train_samples: 5000,
            test_samples: 1000,
            precision: Precision::F32,
        }
    }
}

fn list(value: &str) -> Result<Vec<usize>, String> {
    value.split(',').map(|v| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"))).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("invalid value {value:?} for {key}: {why}"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Defaults overridden by the lines of `text`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Failure::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)));
            };
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Failure::Config(m) => Failure::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Failure>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| bad(key, value, e))
        }
        let m = &mut self.model;
        match key {
            "arch" => m.arch = value.parse().map_err(|e| bad(key, value, e))?,
            "decay" => m.decay = value.parse().map_err(|e| bad(key, value, e))?,
            "alpha" => m.alpha = num(key, value)?,
            "stage_depths" => m.stage_depths = list(value).map_err(|e| bad(key, value, e))?,
            "stage_dims" => m.stage_dims = list(value).map_err(|e| bad(key, value, e))?,
            "stage_heads" => m.stage_heads = list(value).map_err(|e| bad(key, value, e))?,
            "patch_size" => m.patch_size = num(key, value)?,
            "gate_rank" => m.gate_rank = if value == "auto" { None } else { Some(num(key, value)?) },
            "rope" => m.rope = num(key, value)?,
            "image_size" => {
                let s: usize = num(key, value)?;
                m.image_size = (s, s);
                self.task.size = s;
            }
            "num_classes" => {
                let k: usize = num(key, value)?;
                m.num_classes = k;
                self.task.num_classes = k;
            }
            "noise" => self.task.noise = num(key, value)?,
            "min_separation" => self.task.min_separation = num(key, value)?,
            "stride" => self.task.stride = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "min_lr" => self.min_lr = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "train_samples" => self.train_samples = num(key, value)?,
            "test_samples" => self.test_samples = num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, value, "expected f32 or f64")),
                }
            }
            _ => return Err(Failure::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate().map_err(|e| Failure::Config(e.to_string()))?;
        self.task.validate().map_err(Failure::Config)?;
        if self.epochs == 0 || self.batch_size == 0 || self.train_samples == 0 || self.test_samples == 0 {
            return Err(Failure::Config("epochs, batch_size, train_samples and test_samples must be positive".into()));
        }
        self.optimizer().validate().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_samples.div_ceil(self.batch_size)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        let per = self.steps_per_epoch() as u64;
        AdamWConfig {
            lr: self.lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            warmup_steps: per * self.warmup_epochs as u64,
            total_steps: per * self.epochs as u64,
            ..AdamWConfig::default()
        }
    }

    /// Canonical `key = value` text; parsing it reproduces this config.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        for key in KEYS {
            let v = match *key {
                "arch" => m.arch.name().to_string(),
                "decay" => m.decay.name().to_string(),
                "alpha" => format!("{}", m.alpha),
                "stage_depths" => join(&m.stage_depths),
                "stage_dims" => join(&m.stage_dims),
                "stage_heads" => join(&m.stage_heads),
                "patch_size" => m.patch_size.to_string(),
                "gate_rank" => m.gate_rank.map_or("auto".into(), |r| r.to_string()),
                "rope" => m.rope.to_string(),
                "image_size" => self.task.size.to_string(),
                "num_classes" => m.num_classes.to_string(),
                "noise" => format!("{}", self.task.noise),
                "min_separation" => self.task.min_separation.to_string(),
                "stride" => self.task.stride.to_string(),
                "seed" => self.seed.to_string(),
                "data_seed" => self.data_seed.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => format!("{}", self.lr),
                "min_lr" => format!("{}", self.min_lr),
                "warmup_epochs" => self.warmup_epochs.to_string(),
                "weight_decay" => format!("{}", self.weight_decay),
                "train_samples" => self.train_samples.to_string(),
                "test_samples" => self.test_samples.to_string(),
                "precision" => self.precision.name().to_string(),
                _ => unreachable!("every key is echoed"),
            };
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    /// Short stable identifier of this run.
    pub fn run_id(&self) -> String {
        // FNV-1a over the echo keeps ids distinct for any config change
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.echo().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{}-a{}-s{}-{:08x}", self.model.decay.name(), self.model.alpha, self.seed, h as u32)
    }
}
