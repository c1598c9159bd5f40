//! Experiment configuration: a TOML file with a strict schema.
//!
//! Unknown keys are rejected, every section is validated with a
//! field-level message, and any field left out takes the documented
//! default (the default experiment is the full comparative run).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, ConvFrontEnd};
use crate::eval::SelectionMetric;
use crate::latent::{InjectionMode, InjectionPoint};
use crate::model::Mode;
use crate::sim::{Assignment, SimConfig};
use crate::train::{FinetuneConfig, OptimizerKind, TrainConfig};
use crate::{Error, Result};

/// Split fractions by role: optimisation, early stopping, model/rater
/// selection on gold labels, and the held-out test report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val_stop: f64,
    pub val_gold: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.7,
            val_stop: 0.1,
            val_gold: 0.1,
            test: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> [f64; 4] {
        [self.train, self.val_stop, self.val_gold, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|&x| x <= 0.0) {
            return Err(Error::Config(format!(
                "splits must all be positive, got {:?}",
                f
            )));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "splits must sum to 1, got {:?} (sum {})",
                f,
                f.iter().sum::<f64>()
            )));
        }
        Ok(())
    }
}

/// Architecture section; input width and class count come from the
/// simulator section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_injections")]
    pub injections: Vec<InjectionPoint>,
    #[serde(default)]
    pub conv: Option<ConvFrontEnd>,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

fn default_injections() -> Vec<InjectionPoint> {
    vec![InjectionPoint {
        layer: 1,
        mode: InjectionMode::Dense,
    }]
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            hidden: default_hidden(),
            injections: default_injections(),
            conv: None,
        }
    }
}

/// Latent code settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSection {
    #[serde(default = "default_latent_dim")]
    pub dim: usize,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
}

fn default_latent_dim() -> usize {
    10
}

fn default_sigma2() -> f64 {
    1.0
}

impl Default for LatentSection {
    fn default() -> Self {
        LatentSection {
            dim: default_latent_dim(),
            sigma2: default_sigma2(),
        }
    }
}

/// Optimisation section plus the set of experiment modes to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
}

fn default_learning_rate() -> f64 {
    0.01
}

fn default_batch_size() -> usize {
    64
}

fn default_epochs() -> usize {
    150
}

fn default_patience() -> usize {
    20
}

fn default_momentum() -> f64 {
    0.9
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::Addle, Mode::Baseline, Mode::MultiHead, Mode::Jlsl]
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            patience: default_patience(),
            optimizer: OptimizerKind::default(),
            momentum: default_momentum(),
            modes: default_modes(),
        }
    }
}

/// Fine-tuning section.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_ft_steps")]
    pub steps: usize,
    #[serde(default = "default_ft_step_size")]
    pub initial_step: f64,
}

fn default_true() -> bool {
    true
}

fn default_ft_steps() -> usize {
    60
}

fn default_ft_step_size() -> f64 {
    0.1
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            enabled: true,
            steps: default_ft_steps(),
            initial_step: default_ft_step_size(),
        }
    }
}

/// Evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_fpr_max")]
    pub fpr_max: f64,
    #[serde(default = "default_metric")]
    pub greedy_metric: SelectionMetric,
    /// Points on each principal-component sweep grid.
    #[serde(default = "default_sweep_points")]
    pub sweep_points: usize,
}

fn default_fpr_max() -> f64 {
    0.30
}

fn default_metric() -> SelectionMetric {
    SelectionMetric::JtIndex
}

fn default_sweep_points() -> usize {
    9
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            fpr_max: default_fpr_max(),
            greedy_metric: default_metric(),
            sweep_points: default_sweep_points(),
        }
    }
}

/// The whole experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    #[serde(default = "default_simulator")]
    pub simulator: SimConfig,
    #[serde(default)]
    pub splits: SplitConfig,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub latent: LatentSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_master_seed() -> u64 {
    1
}

fn default_simulator() -> SimConfig {
    SimConfig {
        num_samples: 4000,
        num_features: 16,
        num_classes: 4,
        num_raters: 8,
        group_size: 1,
        feature_jitter: 0.1,
        assignment: Assignment::Uniform,
        power_law_exponent: 1.0,
        threshold_sigma: 0.5,
        feature_sigma: 0.3,
        noise_sigma: 0.3,
        oracle_rater: Some(0),
        nonlinear_mix: 0.0,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: default_master_seed(),
            simulator: default_simulator(),
            splits: SplitConfig::default(),
            backbone: BackboneSection::default(),
            latent: LatentSection::default(),
            train: TrainSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator.validate()?;
        self.splits.validate()?;
        self.backbone_config().validate()?;
        self.train_config(Mode::Addle).validate()?;
        if !(self.eval.fpr_max > 0.0 && self.eval.fpr_max <= 1.0) {
            return Err(Error::Config(format!(
                "eval.fpr_max must be in (0, 1], got {}",
                self.eval.fpr_max
            )));
        }
        if self.eval.sweep_points < 2 {
            return Err(Error::Config("eval.sweep_points must be ≥ 2".into()));
        }
        if self.train.modes.is_empty() {
            return Err(Error::Config("train.modes must not be empty".into()));
        }
        if self.finetune.enabled {
            if self.finetune.steps == 0 {
                return Err(Error::Config("finetune.steps must be ≥ 1".into()));
            }
            if !(self.finetune.initial_step > 0.0) {
                return Err(Error::Config("finetune.initial_step must be positive".into()));
            }
        }
        if let SelectionMetric::PartialAuc { cutoff } = self.eval.greedy_metric {
            if cutoff + 1 >= self.simulator.num_classes {
                return Err(Error::Config(format!(
                    "eval.greedy_metric cutoff {} out of range for {} classes",
                    cutoff, self.simulator.num_classes
                )));
            }
        }
        Ok(())
    }

    /// The latent-mode architecture; other modes derive theirs from it.
    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            input_dim: self.simulator.num_features,
            hidden: self.backbone.hidden.clone(),
            num_classes: self.simulator.num_classes,
            latent_dim: self.latent.dim,
            injections: self.backbone.injections.clone(),
            conv: self.backbone.conv,
            heads: 1,
        }
    }

    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            patience: self.train.patience,
            optimizer: self.train.optimizer,
            momentum: self.train.momentum,
            seed: self.master_seed,
            mode,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.finetune.steps,
            initial_step: self.finetune.initial_step,
        }
    }

    /// Canonical TOML re-serialization (independent of input formatting).
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical serialization, for provenance stamps.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }
}
