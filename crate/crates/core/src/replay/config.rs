use serde::{Deserialize, Serialize};

use super::losses::GpMode;
use crate::autodiff::OptimizerSettings;
use crate::consolidation::{CombineMode, ConsolidationKind, DEFAULT_XI};
use crate::error::{Error, Result};
use crate::nets::{OutputActivation, LEAKY_SLOPE};

/// Layer sizes of the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub generator_output: OutputActivation,
    pub slope: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            latent_dim: 4,
            embedding_dim: 4,
            generator_hidden: vec![48, 48],
            critic_hidden: vec![32, 32, 32],
            classifier_hidden: vec![32, 32],
            generator_output: OutputActivation::Linear,
            slope: LEAKY_SLOPE,
        }
    }
}

/// How a training batch is drawn from the replay set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMixing {
    /// Equal numbers of real and generated rows per batch; an epoch is one
    /// pass over the real data.
    Balanced,
    /// Plain shuffled pass over the whole replay set.
    Uniform,
}

/// Everything that shapes one training run apart from data and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub lambda_dprime: f64,
    pub lambda_c: f64,
    pub lambda_g: f64,
    pub consolidation_dprime: ConsolidationKind,
    pub consolidation_c: ConsolidationKind,
    pub si_xi: f64,
    pub fisher_combine: CombineMode,
    pub fisher_samples: usize,
    pub gp_mode: GpMode,
    /// Generated samples per finished task; `None` means the size of that
    /// task's training set.
    pub replay_size: Option<usize>,
    pub resample_replay: bool,
    pub batch_mixing: BatchMixing,
    pub s_max: f64,
    pub binarize_masks: bool,
    pub optimizer: OptimizerSettings,
    /// Settings for the generator and mask embeddings; defaults to `optimizer`.
    pub generator_optimizer: Option<OptimizerSettings>,
    /// Settings for the mask embeddings; defaults to the generator's.
    pub mask_optimizer: Option<OptimizerSettings>,
    pub architecture: Architecture,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 20,
            batch_size: 64,
            n_critic: 5,
            lambda_gp: 10.0,
            lambda_dprime: 100.0,
            lambda_c: 100.0,
            lambda_g: 1.0,
            consolidation_dprime: ConsolidationKind::Ewc,
            consolidation_c: ConsolidationKind::Ewc,
            si_xi: DEFAULT_XI,
            fisher_combine: CombineMode::Sum,
            fisher_samples: 512,
            gp_mode: GpMode::Literal,
            replay_size: None,
            resample_replay: false,
            batch_mixing: BatchMixing::Balanced,
            s_max: 400.0,
            binarize_masks: false,
            optimizer: OptimizerSettings::default(),
            generator_optimizer: None,
            mask_optimizer: None,
            architecture: Architecture::default(),
        }
    }
}

fn config_err(key: &str, message: &str) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.to_string(),
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_gp", self.lambda_gp),
            ("lambda_dprime", self.lambda_dprime),
            ("lambda_c", self.lambda_c),
            ("lambda_g", self.lambda_g),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err(key, "must be ≥ 0"));
            }
        }
        if !(self.si_xi > 0.0) {
            return Err(config_err("si_xi", "must be > 0"));
        }
        if !(self.s_max >= 1.0) {
            return Err(config_err("s_max", "must be ≥ 1"));
        }
        for (key, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_critic", self.n_critic),
            ("fisher_samples", self.fisher_samples),
        ] {
            if v == 0 {
                return Err(config_err(key, "must be ≥ 1"));
            }
        }
        if self.replay_size == Some(0) {
            return Err(config_err("replay_size", "must be ≥ 1"));
        }
        for (key, o) in [
            ("optimizer", Some(&self.optimizer)),
            ("generator_optimizer", self.generator_optimizer.as_ref()),
            ("mask_optimizer", self.mask_optimizer.as_ref()),
        ] {
            if let Some(o) = o {
                if !(o.lr > 0.0) {
                    return Err(config_err(&format!("{key}.lr"), "must be > 0"));
                }
            }
        }
        let a = &self.architecture;
        if a.latent_dim == 0 || a.embedding_dim == 0 {
            return Err(config_err(
                "architecture",
                "latent and embedding sizes must be ≥ 1",
            ));
        }
        if a.generator_hidden.is_empty() || a.critic_hidden.is_empty() {
            return Err(config_err(
                "architecture",
                "generator and critic need at least one hidden layer",
            ));
        }
        let all = a
            .generator_hidden
            .iter()
            .chain(&a.critic_hidden)
            .chain(&a.classifier_hidden);
        if all.into_iter().any(|&w| w == 0) {
            return Err(config_err("architecture", "layer widths must be ≥ 1"));
        }
        Ok(())
    }

    pub fn generator_settings(&self) -> OptimizerSettings {
        self.generator_optimizer.unwrap_or(self.optimizer)
    }

    pub fn mask_settings(&self) -> OptimizerSettings {
        self.mask_optimizer
            .unwrap_or_else(|| self.generator_settings())
    }
}
