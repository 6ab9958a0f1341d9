use std::fmt::Write as _;

use super::optim::{AdamConfig, Schedule};
use crate::config::parse_value;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the subword loss; the character loss gets `1 − gamma`.
    pub gamma: Real,
    pub label_smoothing: Real,
    pub base_lr: Real,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    /// Stop after this many optimizer steps (0 = unlimited).
    pub max_steps: u64,
    /// Seeds weight init, batch order and dropout.
    pub seed: u64,
    /// Padded feature rows per batch.
    pub batch_frames: usize,
    /// Global gradient-norm ceiling (0 disables clipping).
    pub clip_norm: Real,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.5,
            label_smoothing: 0.1,
            base_lr: 1e-3,
            warmup_steps: 8000,
            schedule: Schedule::WarmupInvSqrt,
            max_epochs: 200,
            patience: 10,
            max_steps: 0,
            seed: 0,
            batch_frames: 4000,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "gamma",
    "label_smoothing",
    "lr",
    "warmup_steps",
    "schedule",
    "max_epochs",
    "patience",
    "max_steps",
    "seed",
    "batch_frames",
    "clip_norm",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.base_lr > 0.0) || self.batch_frames == 0 || self.max_epochs == 0 {
            return Err(Error::Config("lr, batch_frames and max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Applies one setting. Returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "gamma" => self.gamma = parse_value(key, value)?,
            "label_smoothing" => self.label_smoothing = parse_value(key, value)?,
            "lr" => self.base_lr = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "max_steps" => self.max_steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "batch_frames" => self.batch_frames = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam.eps = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let vals = [
            self.gamma.to_string(),
            self.label_smoothing.to_string(),
            self.base_lr.to_string(),
            self.warmup_steps.to_string(),
            self.schedule.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.max_steps.to_string(),
            self.seed.to_string(),
            self.batch_frames.to_string(),
            self.clip_norm.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn from_kv(text: &str, label: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in crate::config::parse_kv(text, label)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Version(format!("{label}: unknown training config key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
