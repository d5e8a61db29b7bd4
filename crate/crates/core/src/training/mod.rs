//! Staged optimization: schedule, clipping, Adam, single steps and full
//! resumable runs.

mod optim;
mod run;
mod step;

use serde::{Deserialize, Serialize};

use crate::data::TrainingMode;
use crate::error::{Error, Result};
use crate::losses::TRIPLEC_WEIGHT;
use crate::model::{Group, ModelConfig};

pub use optim::{clip_gradients, global_norm, Adam};
pub use run::{run_training, LogRecord, TrainOutcome, CHECKPOINT_DIR, LOG_FILE};
pub use step::{train_step, OptimizerState, StepOutcome, StepReport, MAX_CONSECUTIVE_SKIPS};

/// Step-wise exponential learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub lr0: f64,
    pub decay_a: f64,
    pub decay_a_every: usize,
    /// epoch at which the second decay phase takes over
    pub decay_a_until: usize,
    pub decay_b: f64,
    pub decay_b_every: usize,
    pub clip_norm: f64,
    pub epochs_total: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            decay_a: 0.98,
            decay_a_every: 2,
            decay_a_until: 100,
            decay_b: 0.9,
            decay_b_every: 2,
            clip_norm: 1.0,
            epochs_total: 120,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        for d in [self.decay_a, self.decay_b] {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("decay factor {d} outside (0, 1]")));
            }
        }
        if self.decay_a_every == 0 || self.decay_b_every == 0 {
            return Err(Error::Config("decay periods must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// `lr0 * a^floor(min(e, until) / pa) * b^floor(max(e - until, 0) / pb)`.
pub fn lr_at(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if epoch >= cfg.epochs_total {
        return Err(Error::Domain(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs_total
        )));
    }
    let a = (epoch.min(cfg.decay_a_until) / cfg.decay_a_every) as i32;
    let b = (epoch.saturating_sub(cfg.decay_a_until) / cfg.decay_b_every) as i32;
    Ok(cfg.lr0 * cfg.decay_a.powi(a) * cfg.decay_b.powi(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainDenoiser,
    PretrainBackbone,
    FinetuneJoint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainDenoiser => "pretrain_denoiser",
            Stage::PretrainBackbone => "pretrain_backbone",
            Stage::FinetuneJoint => "finetune_joint",
        }
    }

    /// Components held fixed during the stage.
    pub fn frozen(self) -> &'static [Group] {
        match self {
            Stage::PretrainDenoiser => &[Group::Backbone],
            Stage::PretrainBackbone => &[Group::Denoiser],
            Stage::FinetuneJoint => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub mode: TrainingMode,
    #[serde(default = "default_w")]
    pub w: f64,
    /// Per-stage schedule; the epoch index restarts at 0 in every stage.
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

fn default_w() -> f64 {
    TRIPLEC_WEIGHT
}

impl StageConfig {
    pub fn new(stage: Stage, epochs: usize, mode: TrainingMode) -> Self {
        Self {
            stage,
            epochs,
            mode,
            w: TRIPLEC_WEIGHT,
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn is_trainable(&self, g: Group) -> bool {
        !self.stage.frozen().contains(&g)
    }
}

/// Everything a training run depends on besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
    /// Targets per batch (a triplec-parallel batch holds 3x this many mixtures).
    pub batch_size: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps per stage.
    #[serde(default)]
    pub max_steps_per_stage: Option<usize>,
}

impl TrainConfig {
    /// The three-stage recipe with one mode throughout.
    pub fn staged(model: ModelConfig, mode: TrainingMode, epochs: [usize; 3], batch_size: usize, seed: u64) -> Self {
        let stages = [Stage::PretrainDenoiser, Stage::PretrainBackbone, Stage::FinetuneJoint]
            .into_iter()
            .zip(epochs)
            .filter(|(_, e)| *e > 0)
            .map(|(s, e)| StageConfig::new(s, e, mode))
            .collect();
        Self {
            model,
            stages,
            batch_size,
            seed,
            max_steps_per_stage: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("no training stages".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.max_steps_per_stage == Some(0) {
            return Err(Error::Config("step cap must be positive".into()));
        }
        for s in &self.stages {
            s.schedule.validate()?;
            if s.epochs > s.schedule.epochs_total {
                return Err(Error::Config(format!(
                    "stage {} runs {} epochs but its schedule covers {}",
                    s.stage.name(),
                    s.epochs,
                    s.schedule.epochs_total
                )));
            }
            if s.epochs == 0 {
                return Err(Error::Config(format!("stage {} has no epochs", s.stage.name())));
            }
            if !(s.w >= 0.0 && s.w.is_finite()) {
                return Err(Error::Config(format!("consistency weight {} invalid", s.w)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = ScheduleConfig::default();
        assert_eq!(lr_at(0, &c).unwrap(), 0.0005);
        assert!((lr_at(2, &c).unwrap() - 4.9e-4).abs() < 1e-18);
        let want = 0.0005 * 0.98f64.powi(50) * 0.9;
        assert!((lr_at(102, &c).unwrap() - want).abs() < 1e-18);
        assert!(matches!(lr_at(120, &c), Err(Error::Domain(_))));
    }

    #[test]
    fn schedule_monotone() {
        let c = ScheduleConfig::default();
        for e in 0..119 {
            let (a, b) = (lr_at(e, &c).unwrap(), lr_at(e + 1, &c).unwrap());
            assert!(b <= a && b > 0.0);
        }
    }

    #[test]
    fn stage_freezing() {
        assert_eq!(Stage::PretrainDenoiser.frozen(), &[Group::Backbone]);
        assert_eq!(Stage::PretrainBackbone.frozen(), &[Group::Denoiser]);
        assert!(Stage::FinetuneJoint.frozen().is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::staged(ModelConfig::tiny(), TrainingMode::Triplec, [1, 1, 1], 2, 0);
        c.validate().unwrap();
        c.stages[0].epochs = 500;
        assert!(c.validate().is_err());
        let c = TrainConfig::staged(ModelConfig::tiny(), TrainingMode::Triplec, [0, 0, 2], 2, 0);
        assert_eq!(c.stages.len(), 1);
    }
}
