//! Optimizer, schedule, the staged trainers and checkpoints.

mod checkpoint;
mod metrics;
mod model;
mod objective;
mod optim;
mod trainer;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{append_metrics_csv, MetricRow, METRICS_HEADER};
pub use model::{DualFeatures, ModelDims, Module, TammModel};
pub use objective::{joint_objective, realign_objective, trimodal_objective, LossTerms};
pub use optim::{adamw_step, cosine_lr, OptimState, ADAM_EPS};
pub use trainer::{train_onestage, train_stage1, train_stage2, Trainer, MONITOR_SAMPLES};

use crate::adapters::DEFAULT_ALPHA;
use crate::error::{Result, TammError};
use crate::losses::DEFAULT_TAU;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Image adapter only.
    Realign,
    /// Point encoder and dual adapters against frozen image/text features.
    Decoupled,
    /// Everything at once.
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Realign => "1",
            Stage::Decoupled => "2",
            Stage::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::Realign),
            "2" => Ok(Stage::Decoupled),
            "joint" => Ok(Stage::Joint),
            _ => Err(TammError::config(format!("unknown stage {s:?} (expected 1, 2 or joint)"))),
        }
    }

    pub fn trainable(self) -> &'static [Module] {
        match self {
            Stage::Realign => &[Module::Cia],
            Stage::Decoupled => &[Module::Point, Module::Iaa, Module::Taa],
            Stage::Joint => &Module::ALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub alpha: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub seed: u64,
    /// Use only the first `views` image views; `None` uses all.
    pub views: Option<usize>,
    /// Stage 2 aligns to adapted (true) or raw (false) image features.
    pub use_cia: bool,
    /// Residual blend for the dual adapters; off by default.
    pub dual_residual_alpha: Option<f64>,
    /// Adapter bottleneck width; `None` means half the feature dim.
    pub adapter_hidden: Option<usize>,
    pub point_hidden: usize,
    pub run_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            warmup_epochs: 2,
            epochs: 50,
            batch_size: 64,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            seed: 0,
            views: None,
            use_cia: true,
            dual_residual_alpha: None,
            adapter_hidden: None,
            point_hidden: 128,
            run_id: "run".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| TammError::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>> {
    if value == none {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl TrainConfig {
    pub const KEYS: [&'static str; 16] = [
        "base_lr",
        "warmup_epochs",
        "epochs",
        "batch_size",
        "tau",
        "alpha",
        "beta1",
        "beta2",
        "weight_decay",
        "seed",
        "train_views",
        "use_cia",
        "dual_residual_alpha",
        "adapter_hidden",
        "point_hidden",
        "run_id",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TammError::config(m));
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "need warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if self.views == Some(0) {
            return bad("train_views must be ≥ 1".into());
        }
        if let Some(a) = self.dual_residual_alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("dual_residual_alpha must lie in [0, 1], got {a}"));
            }
        }
        if self.adapter_hidden == Some(0) || self.point_hidden == 0 {
            return bad("hidden widths must be ≥ 1".into());
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '"']) {
            return bad(format!("run_id {:?} must be non-empty without commas or quotes", self.run_id));
        }
        Ok(())
    }

    /// Sets one key. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "base_lr" => self.base_lr = parse_num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "beta1" => self.betas.0 = parse_num(key, value)?,
            "beta2" => self.betas.1 = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "train_views" => self.views = parse_opt(key, value, "all")?,
            "use_cia" => self.use_cia = parse_num(key, value)?,
            "dual_residual_alpha" => self.dual_residual_alpha = parse_opt(key, value, "off")?,
            "adapter_hidden" => self.adapter_hidden = parse_opt(key, value, "auto")?,
            "point_hidden" => self.point_hidden = parse_num(key, value)?,
            "run_id" => self.run_id = value.to_string(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its current value, in [`TrainConfig::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.base_lr.to_string(),
            self.warmup_epochs.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.tau.to_string(),
            self.alpha.to_string(),
            self.betas.0.to_string(),
            self.betas.1.to_string(),
            self.weight_decay.to_string(),
            self.seed.to_string(),
            show_opt(&self.views, "all"),
            self.use_cia.to_string(),
            show_opt(&self.dual_residual_alpha, "off"),
            show_opt(&self.adapter_hidden, "auto"),
            self.point_hidden.to_string(),
            self.run_id.clone(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn model_dims(&self, feature_dim: usize) -> ModelDims {
        ModelDims {
            feature_dim,
            adapter_hidden: self.adapter_hidden.unwrap_or((feature_dim / 2).max(1)),
            point_hidden: self.point_hidden,
        }
    }
}
