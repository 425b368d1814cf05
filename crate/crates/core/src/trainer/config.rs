use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::graphenc::{DEFAULT_CAP, DEFAULT_HOPS};
use crate::packing::PackingConfig;
use crate::quantizer::{RegionLayout, SharedScope};

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Codebook rows `N`.
    pub codebook_size: usize,
    /// Fused dimension `d`.
    pub dim: usize,
    pub graph_dim: usize,
    pub graph_layers: usize,
    pub topk: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Falls back to `beta` when unset.
    pub lambda: Option<f64>,
    pub tau: f64,
    /// Relative sizes of text specific, graph specific, text shared and
    /// graph shared.
    pub region_split: [f64; 4],
    pub cross_scope: SharedScope,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub hops: usize,
    pub cap: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Steps without selection after which a codeword is re-seeded; 0
    /// disables re-seeding.
    pub dead_code_after: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            codebook_size: 512,
            dim: 32,
            graph_dim: 32,
            graph_layers: 2,
            topk: 4,
            alpha: 0.25,
            beta: 0.1,
            lambda: None,
            tau: 0.07,
            region_split: [0.25; 4],
            cross_scope: SharedScope::Full,
            steps: 500,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            hops: DEFAULT_HOPS,
            cap: DEFAULT_CAP,
            checkpoint_every: 500,
            dead_code_after: 200,
        }
    }

    pub fn paper() -> Self {
        Self {
            codebook_size: 12_000,
            dim: 64,
            graph_dim: 64,
            steps: 3000,
            batch: 1024,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(self.beta)
    }

    pub fn packing(&self) -> PackingConfig {
        PackingConfig {
            beta: self.beta,
            lambda: self.lambda(),
            tau: self.tau,
        }
    }

    pub fn layout(&self) -> Result<RegionLayout, TrainError> {
        Ok(RegionLayout::from_fractions(self.codebook_size, self.region_split)?)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.dim == 0 || self.graph_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.graph_layers == 0 {
            return bad("graph_layers must be at least 1".into());
        }
        if self.batch < 2 {
            return bad(format!("batch must be at least 2, got {}", self.batch));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be nonnegative, got {}", self.lr));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if self.cap == 0 {
            return bad("cap must be at least 1".into());
        }
        self.packing().validate()?;
        let layout = self.layout()?;
        let smallest = layout.ranges().iter().map(|r| r.len()).min().unwrap_or(0);
        if self.topk == 0 || self.topk > smallest {
            return bad(format!("topk={} but the smallest region holds {smallest} rows", self.topk));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}
