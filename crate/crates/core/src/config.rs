//! Run configuration: model and training hyperparameters plus data options,
//! settable from a flat `key = value` file and overridable from the command
//! line. Unknown keys are fatal so typos never silently fall back to
//! defaults.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, Variant};
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Everything a run needs besides file paths. `model.variant`,
/// `model.vocab_size`, and `model.meta_labels` are filled in from the
/// command line and the data, not the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Tokens rarer than this in the training corpus map to UNK.
    pub min_freq: usize,
    /// Keys explicitly set (file or flag), so later stages can tell an
    /// intentional value from an untouched default.
    #[serde(skip)]
    pub set_keys: BTreeSet<String>,
}

impl RunConfig {
    pub fn was_set(&self, key: &str) -> bool {
        self.set_keys.contains(key)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::defaults(Variant::Baseline, special_floor()),
            train: TrainConfig::default(),
            min_freq: 1,
            set_keys: BTreeSet::new(),
        }
    }
}

/// Smallest legal vocab size; placeholder until the data fixes the real one.
fn special_floor() -> usize {
    crate::data::special::RESERVED + 1
}

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("key '{key}': bad value '{value}': {e}")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            // Model architecture.
            "n_layers" => m.n_layers = parse_as(key, value)?,
            "d_model" => m.d_model = parse_as(key, value)?,
            "n_heads" => m.n_heads = parse_as(key, value)?,
            "d_head" => m.d_head = parse_as(key, value)?,
            "latent_dim" => m.latent_dim = parse_as(key, value)?,
            "mlp_hidden" => m.mlp_hidden = parse_as(key, value)?,
            "max_len" => m.max_len = parse_as(key, value)?,
            "layer_norm_eps" => m.layer_norm_eps = parse_as(key, value)?,
            "log_var_clamp" => m.log_var_clamp = parse_as(key, value)?,
            "use_aux_loss" => m.use_aux_loss = parse_as(key, value)?,
            // Optimization.
            "lr" => t.lr = parse_as(key, value)?,
            "beta1" => t.beta1 = parse_as(key, value)?,
            "beta2" => t.beta2 = parse_as(key, value)?,
            "adam_eps" => t.adam_eps = parse_as(key, value)?,
            "batch_size" => t.batch_size = parse_as(key, value)?,
            "max_steps" => t.max_steps = parse_as(key, value)?,
            "anneal_full_steps" => t.anneal_full_steps = parse_as(key, value)?,
            "patience" => t.patience = parse_as(key, value)?,
            "val_interval" => t.val_interval = parse_as(key, value)?,
            "grad_clip" => t.grad_clip = parse_as(key, value)?,
            "seed" => t.seed = parse_as(key, value)?,
            // Data.
            "min_freq" => self.min_freq = parse_as(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        self.set_keys.insert(key.to_string());
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` comments and
    /// blank lines ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        Ok(())
    }
}
