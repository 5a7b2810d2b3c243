//! Flat JSON run configuration for `train-toy`, with `FEM_<KEY>` environment
//! overrides applied before validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fem_core::tasks::ArgmaxTaskConfig;
use fem_core::trainer::{ToyModel, ToyModelKind, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Prefix for environment overrides of config keys and global flags.
pub const ENV_PREFIX: &str = "FEM_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Fem,
    Softmax,
    Both,
}

impl ModelChoice {
    pub fn kinds(self) -> Vec<ToyModelKind> {
        match self {
            ModelChoice::Fem => vec![ToyModelKind::Fem],
            ModelChoice::Softmax => vec![ToyModelKind::Softmax],
            ModelChoice::Both => vec![ToyModelKind::Fem, ToyModelKind::Softmax],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRunConfig {
    pub model: ModelChoice,
    pub t: usize,
    pub d: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub delta: f64,
    pub sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        let task = ArgmaxTaskConfig::default();
        let train = TrainConfig::default();
        Self {
            model: ModelChoice::Both,
            t: task.t,
            d: task.d,
            heads: train.heads,
            steps: train.steps,
            batch: train.batch,
            lr: train.lr,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            weight_decay: train.weight_decay,
            eval_every: train.eval_every,
            delta: task.delta,
            sigma: task.sigma,
            n_train: task.n_train,
            n_val: task.n_val,
        }
    }
}

impl ToyRunConfig {
    /// The scaled-down preset: T=64, D=128, 500 steps.
    pub fn ci_preset() -> Self {
        Self { t: 64, d: 128, steps: 500, ..Self::default() }
    }

    pub fn task(&self, seed: u64) -> ArgmaxTaskConfig {
        ArgmaxTaskConfig {
            t: self.t,
            d: self.d,
            delta: self.delta,
            sigma: self.sigma,
            n_train: self.n_train,
            n_val: self.n_val,
            seed,
        }
    }

    pub fn train(&self, model: ToyModelKind) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            heads: self.heads,
            model,
            eval_every: self.eval_every,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.task(0).validate().map_err(|e| CliError::Config(e.to_string()))?;
        for kind in self.model.kinds() {
            self.train(kind).validate().map_err(|e| CliError::Config(e.to_string()))?;
            ToyModel::new(kind, self.d, self.heads, 0).map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Reads `path`, applies overrides from `env` and validates.
    pub fn load(path: &Path, env: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, env)
    }

    pub fn from_json(text: &str, env: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not JSON: {e}")))?;
        let Value::Object(map) = &mut value else {
            return Err(CliError::Config("config must be a flat JSON object".into()));
        };
        if let Some((k, _)) = map.iter().find(|(_, v)| v.is_object() || v.is_array()) {
            return Err(CliError::Config(format!("config key '{k}' is nested; the schema is flat")));
        }
        let keys: Vec<String> = match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        };
        for key in keys {
            if let Some(raw) = env.get(&format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                // Numbers and booleans parse as JSON; anything else is a string.
                let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
                map.insert(key, parsed);
            }
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Snapshot of the process environment restricted to the override prefix.
pub fn env_overrides() -> BTreeMap<String, String> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}
