use std::fmt;
use std::str::FromStr;

use crate::decay::{DecayVariant, Grid};
use crate::error::{Error, Result};
use crate::sda::{AttentionPath, LayerDims};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Four downsampling stages.
    Hierarchical,
    /// One constant-resolution stack.
    Plain,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Hierarchical => "hierarchical",
            Architecture::Plain => "plain",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Architecture::Hierarchical),
            "plain" => Ok(Architecture::Plain),
            _ => Err(Error::Config(format!("unknown architecture {s:?} (expected hierarchical or plain)"))),
        }
    }
}

/// Stages that use the decomposed path under content-aware decay in the
/// hierarchical layout.
pub const DECOMPOSED_STAGES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub decay: DecayVariant,
    pub alpha: f64,
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub patch_size: usize,
    /// `(height, width)` of input images.
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output-gate rank; `None` means a quarter of the stage dim.
    pub gate_rank: Option<usize>,
    pub rope: bool,
}

impl ModelConfig {
    pub fn hierarchical() -> Self {
        Self {
            arch: Architecture::Hierarchical,
            decay: DecayVariant::Cag,
            alpha: 0.1,
            stage_depths: vec![2, 2, 2, 2],
            stage_dims: vec![32, 64, 96, 128],
            stage_heads: vec![2, 2, 4, 4],
            patch_size: 4,
            image_size: (32, 32),
            in_channels: 1,
            num_classes: 4,
            gate_rank: None,
            rope: true,
        }
    }

    pub fn plain() -> Self {
        Self {
            arch: Architecture::Plain,
            stage_depths: vec![4],
            stage_dims: vec![64],
            stage_heads: vec![4],
            ..Self::hierarchical()
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_depths.len();
        if n == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.stage_dims.len() != n || self.stage_heads.len() != n {
            return Err(Error::Config(format!(
                "stage lists disagree: {} depths, {} dims, {} heads",
                n,
                self.stage_dims.len(),
                self.stage_heads.len()
            )));
        }
        if self.arch == Architecture::Plain && n != 1 {
            return Err(Error::Config(format!("plain architecture has one stage, got {n}")));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.patch_size == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("patch_size, in_channels and num_classes must be positive".into()));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("stage depths must be positive".into()));
        }
        for s in 0..n {
            self.layer_dims(s)?;
        }
        let factor = self.patch_size << (n - 1);
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!("image {h}x{w} is not divisible by {factor} (patch size times stage downsampling)")));
        }
        Ok(())
    }

    pub fn layer_dims(&self, stage: usize) -> Result<LayerDims> {
        let (d, heads) = (self.stage_dims[stage], self.stage_heads[stage]);
        match self.gate_rank {
            Some(r) => LayerDims::with_rank(d, heads, r),
            None => LayerDims::new(d, heads),
        }
    }

    pub fn stage_grid(&self, stage: usize) -> Result<Grid> {
        let f = self.patch_size << stage;
        Grid::new(self.image_size.0 / f, self.image_size.1 / f)
    }

    pub fn stage_path(&self, stage: usize) -> AttentionPath {
        match (self.decay, self.arch) {
            (DecayVariant::Decomposed, _) => AttentionPath::Decomposed,
            (DecayVariant::Cag, Architecture::Hierarchical) if stage < DECOMPOSED_STAGES => AttentionPath::Decomposed,
            _ => AttentionPath::Full,
        }
    }

    /// Closed-form trainable scalar count.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let p = self.patch_size;
        let d0 = self.stage_dims[0];
        let mut total = p * p * self.in_channels * d0 + d0;
        for s in 0..self.stages() {
            let d = self.stage_dims[s];
            if s > 0 {
                total += 4 * self.stage_dims[s - 1] * d + d;
            }
            total += self.stage_depths[s] * self.layer_dims(s)?.param_count(self.stage_path(s));
        }
        let last = *self.stage_dims.last().unwrap_or(&0);
        Ok(total + 2 * last + last * self.num_classes + self.num_classes)
    }
}
