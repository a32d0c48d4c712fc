//! Configuration layering and error classification.
//!
//! Settings resolve as flags over the TOML file over built-in defaults.

use std::fmt;
use std::fs;
use std::path::Path;

use dualenc_core::train::TrainConfig;
use dualenc_core::{Error, ModelConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::TrainFlags;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 1,
            CliError::Core(Error::Divergence(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// `[model]` and `[train]` tables of a config file.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub model: Option<toml::Table>,
    pub train: Option<toml::Table>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)?;
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
        let mut take = |name: &str| -> CliResult<Option<toml::Table>> {
            match table.remove(name) {
                None => Ok(None),
                Some(toml::Value::Table(t)) => Ok(Some(t)),
                Some(_) => Err(CliError::Usage(format!("config file: [{name}] must be a table"))),
            }
        };
        let model = take("model")?;
        let train = take("train")?;
        if let Some(key) = table.keys().next() {
            return Err(CliError::Usage(format!("config file: unknown section {key:?}")));
        }
        Ok(Self { model, train })
    }
}

/// `base` with every key of `overlay` replaced; keys `base` lacks are rejected.
pub fn layer<T: Serialize + DeserializeOwned>(base: &T, overlay: Option<&toml::Table>, section: &str) -> CliResult<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| CliError::Usage(format!("[{section}] defaults: {e}")))?;
    if let Some(over) = overlay {
        for (k, v) in over {
            if !table.contains_key(k) {
                return Err(CliError::Usage(format!("config file: unknown key {k:?} in [{section}]")));
            }
            table.insert(k.clone(), v.clone());
        }
    }
    toml::Value::Table(table).try_into().map_err(|e| CliError::Usage(format!("config file [{section}]: {e}")))
}

/// Flags that were given replace the layered training settings.
pub fn apply_train_flags(cfg: &mut TrainConfig, f: &TrainFlags) {
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = f.$field { cfg.$field = v; })*
        };
    }
    set!(max_steps, batch_size, lr_start, lr_end, anneal_steps, dropout, workers, seed, eval_every, eval_pool_size, checkpoint_every, range_update_period);
    if f.no_quantize {
        cfg.quantize = false;
    }
}

pub fn resolve_train(base: TrainConfig, file: &ConfigFile, flags: &TrainFlags) -> CliResult<TrainConfig> {
    let mut cfg = layer(&base, file.train.as_ref(), "train")?;
    apply_train_flags(&mut cfg, flags);
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_model(base: ModelConfig, file: &ConfigFile) -> CliResult<ModelConfig> {
    layer(&base, file.model.as_ref(), "model")
}

/// Resolved training defaults rendered for `--help`.
pub fn defaults_help(cfg: &TrainConfig) -> String {
    let body = toml::to_string(cfg).unwrap_or_default();
    format!("Training defaults (override with flags or a [train] table in --config):\n{body}")
}
