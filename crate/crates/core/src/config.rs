use serde::{Deserialize, Serialize};

use crate::diffusion::{GuidanceConfig, DEFAULT_LEVELS};
use crate::error::{Error, Result};
use crate::geometry::EmbedMode;
use crate::model::optim::AdamWConfig;
use crate::model::DenoiserConfig;
use crate::sequence::Ablation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub levels: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { levels: DEFAULT_LEVELS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 8,
            steps: 30_000,
            checkpoint_every: 1000,
            log_every: 10,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Everything a run needs besides data and seed.
///
/// The six top-level keys are required; nested keys fall back to defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub training: TrainingConfig,
    pub ablation: Ablation,
    pub embed_mode: EmbedMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            training: TrainingConfig::default(),
            ablation: Ablation::Fpi,
            embed_mode: EmbedMode::Plucker,
        };
        cfg.resolve();
        cfg
    }
}

impl RunConfig {
    /// Fills values whose default depends on other keys.
    pub fn resolve(&mut self) {
        if self.guidance.frac_level.is_none() {
            self.guidance.frac_level = Some(self.guidance.frac_level(self.schedule.levels));
        }
        self.model.embed_mode = self.embed_mode;
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            embed_mode: self.embed_mode,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser_config().validate()?;
        if self.schedule.levels < 2 {
            return Err(Error::validation("schedule.levels", "must be at least 2"));
        }
        self.guidance.validate(self.schedule.levels)?;
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::validation("training.batch_size", "must be positive"));
        }
        if t.log_every == 0 || t.checkpoint_every == 0 {
            return Err(Error::validation("training.log_every", "intervals must be positive"));
        }
        let o = &t.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::validation(
                "training.optimizer.lr",
                format!("{} is not positive", o.lr),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::validation(
                "training.optimizer.beta1",
                "betas must lie in [0, 1)",
            ));
        }
        if !(o.eps > 0.0) || o.weight_decay < 0.0 || o.clip_norm < 0.0 {
            return Err(Error::validation(
                "training.optimizer",
                "eps must be positive, decay and clip non-negative",
            ));
        }
        Ok(())
    }
}
