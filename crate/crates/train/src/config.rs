//! Training configuration, read from and written to TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rise_core::assignment::AssignConfig;
use rise_core::data::ShapesConfig;
use rise_core::filter::{FilterSchedule, PseudoBoxOptions};
use rise_core::losses::{FocalParams, LossWeights, PositiveAggregation};
use rise_core::synthesis::{AugmentationSpec, SequenceConfig};
use rise_model::{DetectConfig, ModelConfig};

use crate::error::{Result, TrainError};

/// Which predictions serve as negatives for an anchor in the contrastive loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Non-positive predictions of the second frame.
    #[default]
    SecondFrame,
    /// Non-positive predictions of both frames.
    BothFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Positive views kept per target.
    pub view_cap: usize,
    pub aggregation: PositiveAggregation,
    pub negatives: NegativeSource,
    /// Take dot products of unit-length embeddings.
    pub normalize: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            view_cap: 10,
            aggregation: PositiveAggregation::Numerator,
            negatives: NegativeSource::SecondFrame,
            normalize: false,
        }
    }
}

/// Synthetic benchmark generated in memory when no dataset directory is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub seed: u64,
    pub shapes: ShapesConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: 2000,
            test_images: 400,
            seed: 7,
            shapes: ShapesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by `lr_decay_factor` from this step on.
    pub lr_decay_step: u64,
    pub lr_decay_factor: f64,
    /// Labeled images per step.
    pub labeled_batch: usize,
    /// Unlabeled images per step.
    pub unlabeled_batch: usize,
    pub labeled_fraction: f64,
    /// Train on the labeled split only, without the embedding loss.
    pub supervised_only: bool,
    /// Steps trained on labeled sequences only before unlabeled images join.
    pub burn_in_steps: u64,
    pub loss_weights: LossWeights,
    pub focal: FocalParams,
    pub filter: FilterSchedule,
    /// `(start, peak)` threshold ramp of the `threshold_only` filter, which
    /// has no quantile stage and so needs a stricter threshold.
    pub threshold_only_gamma: (f64, f64),
    pub pseudo_box: PseudoBoxOptions,
    /// Pseudo-labels whose mask IoU with a pasted object exceeds this are dropped.
    pub pseudo_overlap_iou: f64,
    pub augmentation: AugmentationSpec,
    pub sequence: SequenceConfig,
    pub assign: AssignConfig,
    pub embed: EmbedConfig,
    pub model: ModelConfig,
    pub detect: DetectConfig,
    /// Grow the bank with well-segmented labeled predictions.
    pub bank_growth: bool,
    /// Mask IoU against ground truth required for a prediction to enter the bank.
    pub bank_growth_iou: f64,
    pub seeds: Vec<u64>,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    /// Test-set evaluation every this many steps; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub data: Option<DataConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 12_000,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            lr_decay_step: 8_000,
            lr_decay_factor: 0.1,
            labeled_batch: 1,
            unlabeled_batch: 2,
            labeled_fraction: 0.1,
            supervised_only: false,
            burn_in_steps: 0,
            loss_weights: LossWeights::default(),
            focal: FocalParams::default(),
            filter: FilterSchedule::default(),
            threshold_only_gamma: (0.85, 0.98),
            pseudo_box: PseudoBoxOptions::default(),
            pseudo_overlap_iou: 0.5,
            augmentation: AugmentationSpec::default(),
            sequence: SequenceConfig::default(),
            assign: AssignConfig::default(),
            embed: EmbedConfig::default(),
            model: ModelConfig::default(),
            detect: DetectConfig::default(),
            bank_growth: false,
            bank_growth_iou: 0.75,
            seeds: vec![0, 1, 2],
            log_interval: 100,
            checkpoint_interval: 2_000,
            eval_interval: 0,
            data: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale setup: 32x40 images, the reduced network and a schedule
    /// compressed to `total_steps`. The small network is far less confident
    /// than a full-size one, so the score thresholds are lowered, and the
    /// unlabeled branch waits for a third of the run.
    pub fn toy(total_steps: u64) -> Self {
        let model = ModelConfig::toy();
        let shapes = ShapesConfig::with_resolution(model.height, model.width);
        let mut cfg = Self {
            learning_rate: 1e-3,
            unlabeled_batch: 1,
            burn_in_steps: 4_000,
            loss_weights: LossWeights {
                lambda4: 0.25,
                ..LossWeights::default()
            },
            filter: FilterSchedule {
                gamma_start: 0.2,
                gamma_peak: 0.4,
                ..FilterSchedule::default()
            },
            threshold_only_gamma: (0.4, 0.6),
            assign: AssignConfig {
                k_per_target: 1,
                center_candidates: 1,
                ..AssignConfig::default()
            },
            embed: EmbedConfig {
                normalize: true,
                ..EmbedConfig::default()
            },
            model,
            log_interval: (total_steps / 20).max(1),
            checkpoint_interval: 0,
            data: Some(DataConfig {
                shapes,
                ..DataConfig::default()
            }),
            ..Self::default()
        };
        cfg.set_total_steps(total_steps);
        cfg
    }

    /// Changes the run length and rescales every step-based schedule with it.
    pub fn set_total_steps(&mut self, total_steps: u64) {
        let scale = |v: u64| ((v as f64 * total_steps as f64 / self.total_steps as f64).round() as u64).max(1);
        self.lr_decay_step = scale(self.lr_decay_step);
        if self.burn_in_steps > 0 {
            self.burn_in_steps = scale(self.burn_in_steps);
        }
        self.filter.step_interval = scale(self.filter.step_interval);
        self.total_steps = total_steps;
        self.filter.total_steps = total_steps;
    }

    /// The supervised-only baseline: no embedding loss, unlabeled data unused.
    pub fn baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.supervised_only = true;
        cfg.loss_weights.lambda3 = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(TrainError::config("total_steps must be positive"));
        }
        if self.lr_decay_step >= self.total_steps {
            return Err(TrainError::config(format!(
                "lr_decay_step {} must be below total_steps {}",
                self.lr_decay_step, self.total_steps
            )));
        }
        if self.labeled_batch == 0 || (!self.supervised_only && self.unlabeled_batch == 0) {
            return Err(TrainError::config("batch sizes must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0 && self.lr_decay_factor > 0.0) {
            return Err(TrainError::config("learning rate, decay factor and weight decay must be positive"));
        }
        if self.filter.total_steps != self.total_steps {
            return Err(TrainError::config("filter.total_steps must equal total_steps"));
        }
        let (lo, hi) = self.threshold_only_gamma;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(TrainError::config("threshold_only_gamma must satisfy 0 <= start <= peak <= 1"));
        }
        if self.burn_in_steps >= self.total_steps && !self.supervised_only {
            return Err(TrainError::config("burn_in_steps must be below total_steps"));
        }
        if !(0.0..=1.0).contains(&self.pseudo_overlap_iou) || !(0.0..=1.0).contains(&self.bank_growth_iou) {
            return Err(TrainError::config("IoU thresholds must lie in [0, 1]"));
        }
        if self.embed.view_cap == 0 || self.log_interval == 0 {
            return Err(TrainError::config("view_cap and log_interval must be positive"));
        }
        self.loss_weights.validate()?;
        self.filter.validate()?;
        self.augmentation.validate()?;
        self.sequence.validate()?;
        self.model.validate()?;
        Ok(())
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if step >= self.lr_decay_step {
            self.learning_rate * self.lr_decay_factor
        } else {
            self.learning_rate
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TrainError::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| TrainError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| TrainError::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| TrainError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.total_steps, c.lr_decay_step), (12_000, 8_000));
        assert_eq!((c.learning_rate, c.weight_decay), (1e-4, 1e-4));
        assert_eq!((c.labeled_batch, c.unlabeled_batch), (1, 2));
        assert!(c.validate().is_ok());
        assert_eq!(c.learning_rate_at(7_999), 1e-4);
        assert!((c.learning_rate_at(8_000) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::toy(300);
        let text = c.to_toml().unwrap();
        assert!(text.contains("total_steps = 300"));
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let c = TrainConfig::from_toml("total_steps = 50\nlr_decay_step = 40\n[filter]\ntotal_steps = 50\nmode = \"quantile_only\"\n").unwrap();
        assert_eq!(c.filter.mode, rise_core::filter::FilterMode::QuantileOnly);
        assert_eq!(c.filter.a0, 0.995);
        assert!(c.validate().is_ok());
        assert!(TrainConfig::from_toml("total_stepz = 5").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = TrainConfig::toy(100);
        c.lr_decay_step = 100;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::toy(100);
        c.unlabeled_batch = 0;
        assert!(c.validate().is_err());
        assert!(c.baseline().validate().is_ok());
    }

    #[test]
    fn rescaling_keeps_proportions() {
        let c = TrainConfig::toy(600);
        assert_eq!(c.lr_decay_step, 400);
        assert_eq!(c.filter.step_interval, 50);
        assert_eq!(c.filter.total_steps, 600);
    }
}
