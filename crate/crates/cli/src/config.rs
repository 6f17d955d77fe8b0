//! Run configuration: a TOML file with one table per concern.
//!
//! Precedence, lowest first: built-in defaults, the config file, environment
//! variables named `NISER__<SECTION>__<KEY>` (e.g. `NISER__TRAIN__LR=0.01`), then
//! command-line flags.

use std::path::Path;

use niser::eval::{EvalOptions, DEFAULT_K, DEFAULT_PHI_GRID};
use niser::graph::EdgeMode;
use niser::model::{ModelConfig, Reduction, Variant};
use niser::online::OnlineConfig;
use niser::synth::SynthConfig;
use niser::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENV_PREFIX: &str = "NISER__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub d: usize,
    /// Longest prefix fed to the model; defaults to 10 for "+" variants, 50 otherwise.
    pub max_len: Option<usize>,
    pub tau: usize,
    pub sigma: f64,
    /// Overrides the variant's input dropout.
    pub dropout: Option<f64>,
    pub edge_mode: EdgeMode,
    pub reduction: Reduction,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::NiserPlus,
            d: 100,
            max_len: None,
            tau: 1,
            sigma: 16.0,
            dropout: None,
            edge_mode: EdgeMode::Weighted,
            reduction: Reduction::Mean,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        let base = ModelConfig::for_variant(self.variant);
        let max_len = self.max_len.unwrap_or(base.max_len);
        let mut cfg = base.with_dims(self.d, max_len, self.tau);
        cfg.sigma = self.sigma;
        if let Some(p) = self.dropout {
            cfg.dropout_p = p;
        }
        cfg.edge_mode = self.edge_mode;
        cfg.reduction = self.reduction;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub min_item_support: usize,
    pub min_session_len: usize,
    /// Trailing days held out as the test split.
    pub test_days: usize,
    /// Latest share of training sessions used for early stopping.
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            min_item_support: 5,
            min_session_len: 2,
            test_days: 1,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub batch_size: usize,
    pub phi_grid: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            batch_size: 100,
            phi_grid: DEFAULT_PHI_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    /// Models trained with seeds `train.seed + 0..n_seeds`.
    pub n_seeds: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { n_seeds: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub ensemble: EnsembleSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub synth: SynthConfig,
    pub online: OnlineConfig,
}

impl RunConfig {
    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            k: self.eval.k,
            batch_size: self.eval.batch_size,
            phi_grid: self.eval.phi_grid.clone(),
            workers: self.train.workers,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// Defaults, then `path`, then `NISER__` variables from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::usage(format!("config {}: {}", p.display(), one_line(&e))))?
            }
            None => toml::Table::new(),
        };
        let mut overrides: Vec<(String, String)> =
            env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, value) in overrides {
            apply_env(&mut table, &key, &value)?;
        }
        table
            .try_into::<RunConfig>()
            .map_err(|e| CliError::usage(format!("config: {}", one_line(&e))))
    }
}

fn one_line(e: &impl std::fmt::Display) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn apply_env(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|p| p.to_lowercase()).collect();
    if path.len() != 2 || path.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("{key}: expected {ENV_PREFIX}<SECTION>__<KEY>")));
    }
    // typed when the text parses as a TOML value, a plain string otherwise
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let section = table
        .entry(path[0].clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match section {
        toml::Value::Table(t) => {
            t.insert(path[1].clone(), value);
            Ok(())
        }
        _ => Err(CliError::usage(format!("{key}: `{}` is not a section", path[0]))),
    }
}
