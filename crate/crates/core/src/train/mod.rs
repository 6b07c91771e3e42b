//! Training: optimizer, schedule, dataset alternation and the baselines.

mod monitor;
mod optim;
mod step;
mod strategy;

pub use monitor::{LogRow, Monitor};
pub use optim::{decays, param_groups, sgd_step, OptimizerState, ParamGroup};
pub use step::{dat_backward, dat_step, non_dat_step};
pub use strategy::{
    da_stage_two, da_two_stage, finetune, train_label_remap, train_multi, train_single, TwoStage,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{SharingConfig, DEFAULT_WIDTHS};

/// Hyperparameters shared by every strategy.
///
/// `loss_weights` may be left empty, meaning weight 1 for every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub loss_weights: Vec<f64>,
    pub dat_enabled: bool,
    pub sharing: SharingConfig,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            max_iter: 3000,
            batch_size: 8,
            loss_weights: Vec::new(),
            dat_enabled: true,
            sharing: SharingConfig::CDCL,
            widths: DEFAULT_WIDTHS.to_vec(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_datasets: usize) -> Result<()> {
        self.check(num_datasets)?;
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    /// Like `validate` but accepts `max_iter == 0` (no-op training).
    pub(crate) fn check(&self, num_datasets: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return bad(format!("poly_power must be positive, got {}", self.poly_power));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("widths must be non-empty and positive, got {:?}", self.widths));
        }
        if !self.loss_weights.is_empty() && self.loss_weights.len() != num_datasets {
            return bad(format!(
                "{} loss weight(s) for {num_datasets} dataset(s)",
                self.loss_weights.len()
            ));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn weights(&self, num_datasets: usize) -> Vec<f64> {
        if self.loss_weights.is_empty() {
            vec![1.0; num_datasets]
        } else {
            self.loss_weights.clone()
        }
    }
}

/// `lr0 * (1 - iter / max_iter) ^ poly_power`.
pub fn poly_lr(cfg: &TrainConfig, iter: usize) -> Result<f64> {
    if iter > cfg.max_iter || cfg.max_iter == 0 {
        return Err(Error::Schedule { iter, max_iter: cfg.max_iter });
    }
    Ok(cfg.lr0 * (1.0 - iter as f64 / cfg.max_iter as f64).powf(cfg.poly_power))
}
