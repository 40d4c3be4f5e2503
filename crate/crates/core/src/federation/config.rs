use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the round-0 global model comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    Random,
    Checkpoint(PathBuf),
}

/// Artificial per-site delays that shuffle thread completion order. Only
/// tests set this; results must not depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Jitter {
    pub seed: u64,
    pub max_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub max_rounds: usize,
    /// Rounds without a `min_delta` gain in mean validation AUROC before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub init: InitStrategy,
    /// Fraction of each training set held out (by patient) for early stopping.
    pub validation_fraction: f64,
    /// Weight site updates by training-set size instead of uniformly.
    pub size_weighted: bool,
    /// Train sites on separate threads within a round.
    pub parallel: bool,
    #[serde(skip)]
    pub jitter: Option<Jitter>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            max_rounds: 20,
            patience: 5,
            min_delta: 1e-3,
            init: InitStrategy::Random,
            validation_fraction: 0.1,
            size_weighted: false,
            parallel: true,
            jitter: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::Config("federation.max_rounds must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("federation.patience must be >= 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config("federation.min_delta must be >= 0".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("federation.validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}
