//! Run configuration: TOML files with strict unknown-key rejection, defaults
//! matching the reference hyperparameters, and derivation of the model shape
//! from the scenario family.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{ScenarioConfig, ENTITY_FEATURES, N_ACTIONS};
use crate::error::{OptError, Result};
use crate::model::{Activation, MixerKind, ModelConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Stacked attention layers (K).
    pub n_layers: usize,
    /// Interaction prototypes per layer (N).
    pub n_prototypes: usize,
    pub d_x: usize,
    pub d_h: usize,
    pub d_mix: usize,
    pub activation: Activation,
    pub mixer: MixerKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_prototypes: 4,
            d_x: 32,
            d_h: 32,
            d_mix: 32,
            activation: Activation::Sparsemax,
            mixer: MixerKind::Qmix,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Contrastive-disagreement weight.
    pub alpha: f64,
    /// Conditional-mutual-information weight.
    pub beta: f64,
    /// Probability floor inside KL logarithms.
    pub kl_clamp: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            kl_clamp: crate::numerics::KL_CLAMP,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub total_env_steps: usize,
    pub batch_episodes: usize,
    pub buffer_episodes: usize,
    pub gamma: f64,
    pub lr: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub grad_clip: f64,
    pub target_sync_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: usize,
    /// Evaluation cadence in environment steps.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Stop once the train-split greedy win rate reaches this level (0 disables).
    pub early_stop_win_rate: f64,
    /// Episodes accumulated per backward pass inside one batch.
    pub accum_chunk: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            seed: 0,
            total_env_steps: 1_000_000,
            batch_episodes: 32,
            buffer_episodes: 5000,
            gamma: 0.99,
            lr: 5e-4,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-5,
            grad_clip: 10.0,
            target_sync_interval: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            eval_interval: 10_000,
            eval_episodes: 32,
            early_stop_win_rate: 0.0,
            accum_chunk: 8,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub env: ScenarioConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| OptError::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let m = &self.model;
        if m.n_layers == 0 || m.n_prototypes == 0 || m.d_x == 0 || m.d_h == 0 || m.d_mix == 0 {
            return Err(OptError::Config("model dimensions must be positive".into()));
        }
        let t = &self.train;
        if t.batch_episodes == 0 || t.buffer_episodes < t.batch_episodes {
            return Err(OptError::Config(
                "buffer must hold at least one batch of episodes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&t.gamma) {
            return Err(OptError::Config("gamma must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&t.epsilon_start) || !(0.0..=1.0).contains(&t.epsilon_end) {
            return Err(OptError::Config("epsilon bounds must lie in [0, 1]".into()));
        }
        if t.lr <= 0.0 {
            return Err(OptError::Config("learning rate must be positive".into()));
        }
        if t.accum_chunk == 0 {
            return Err(OptError::Config("accum_chunk must be positive".into()));
        }
        if self.loss.alpha < 0.0 || self.loss.beta < 0.0 {
            return Err(OptError::Config("loss weights must be nonnegative".into()));
        }
        if self.loss.kl_clamp <= 0.0 {
            return Err(OptError::Config("kl_clamp must be positive".into()));
        }
        Ok(())
    }

    /// Model shape implied by this config and scenario family.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            n_prototypes: self.model.n_prototypes,
            d_x: self.model.d_x,
            d_h: self.model.d_h,
            d_mix: self.model.d_mix,
            d_e: ENTITY_FEATURES,
            max_entities: self.env.max_entities(),
            n_actions: N_ACTIONS,
            max_agents: self.env.max_agents(),
            activation: self.model.activation,
            mixer: self.model.mixer,
            kl_clamp: self.loss.kl_clamp,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.model.n_prototypes, 4);
        assert_eq!(cfg.model.d_x, 32);
        assert_eq!(cfg.loss.alpha, 0.5);
        assert_eq!(cfg.loss.beta, 0.1);
        assert_eq!(cfg.loss.kl_clamp, 1e-8);
        assert_eq!(cfg.train.batch_episodes, 32);
        assert_eq!(cfg.train.buffer_episodes, 5000);
        assert_eq!(cfg.train.target_sync_interval, 200);
        assert_eq!(cfg.train.gamma, 0.99);
        assert_eq!(cfg.train.lr, 5e-4);
        assert_eq!(cfg.train.epsilon_anneal_steps, 50_000);
        assert_eq!(cfg.train.grad_clip, 10.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_toml_gives_defaults_and_roundtrips() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg = RunConfig::from_toml_str(
            "[model]\nn_prototypes = 2\nactivation = \"softmax\"\n[train]\nseed = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.model.n_prototypes, 2);
        assert_eq!(cfg.model.activation, Activation::Softmax);
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.gamma, 0.99);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[model]\nlayers = 2\n").is_err());
        assert!(RunConfig::from_toml_str("[optimizer]\nlr = 1.0\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\ngamma = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nlr = -1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nn_prototypes = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nmixer = \"qtran\"\n").is_err());
    }

    #[test]
    fn model_config_derives_from_scenario() {
        let cfg = RunConfig::default();
        let mc = cfg.model_config();
        assert_eq!(mc.max_entities, 4 + 3 + 2);
        assert_eq!(mc.max_agents, 4);
        assert_eq!(mc.d_e, ENTITY_FEATURES);
        assert_eq!(mc.n_actions, N_ACTIONS);
    }
}
