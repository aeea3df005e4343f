use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Optimization and objective settings. Every field has a default and a
/// config-file key of the same name.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub w_vtm: f64,
    pub w_mlm: f64,
    pub w_vtc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Contrastive temperature.
    pub temperature: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub mask_prob: f64,
    pub neg_prob: f64,
    /// Metric rows are written every `log_every` steps and at the last step.
    pub log_every: usize,
    /// Intermediate checkpoints every `checkpoint_every` steps; 0 disables.
    pub checkpoint_every: usize,
    /// Run matrix products in f32 during training. Everything else,
    /// including stored parameters and optimizer state, stays f64.
    pub single_precision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 1e-2,
            warmup_fraction: 0.1,
            total_steps: 2000,
            batch_size: 32,
            seed: 0,
            w_vtm: 1.0,
            w_mlm: 1.0,
            w_vtc: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            temperature: 0.07,
            clip_norm: 1.0,
            mask_prob: 0.15,
            neg_prob: 0.5,
            log_every: 10,
            checkpoint_every: 0,
            single_precision: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("train config: {msg}")));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if [self.w_vtm, self.w_mlm, self.w_vtc].iter().any(|w| !(*w >= 0.0)) {
            return bad("objective weights must be >= 0".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be > 0", self.temperature));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("base_lr, weight_decay and clip_norm must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || !(0.0..=1.0).contains(&self.neg_prob) {
            return bad("mask_prob and neg_prob must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take_into("base_lr", &mut self.base_lr)?;
        kv.take_into("weight_decay", &mut self.weight_decay)?;
        kv.take_into("warmup_fraction", &mut self.warmup_fraction)?;
        kv.take_into("total_steps", &mut self.total_steps)?;
        kv.take_into("batch_size", &mut self.batch_size)?;
        kv.take_into("seed", &mut self.seed)?;
        kv.take_into("w_vtm", &mut self.w_vtm)?;
        kv.take_into("w_mlm", &mut self.w_mlm)?;
        kv.take_into("w_vtc", &mut self.w_vtc)?;
        kv.take_into("beta1", &mut self.beta1)?;
        kv.take_into("beta2", &mut self.beta2)?;
        kv.take_into("eps", &mut self.eps)?;
        kv.take_into("temperature", &mut self.temperature)?;
        kv.take_into("clip_norm", &mut self.clip_norm)?;
        kv.take_into("mask_prob", &mut self.mask_prob)?;
        kv.take_into("neg_prob", &mut self.neg_prob)?;
        kv.take_into("log_every", &mut self.log_every)?;
        kv.take_into("checkpoint_every", &mut self.checkpoint_every)?;
        kv.take_into("single_precision", &mut self.single_precision)?;
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.total_steps as f64) * self.warmup_fraction).round() as usize
    }
}
