use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{default_benchmark, SiteSpec};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_REDRAWS;
use crate::federation::{FederationConfig, Scenario};
use crate::ssl::SSLConfig;
use crate::vit::{TrainConfig, ViTConfig};

pub const DEFAULT_BENCHMARK: &str = "default_benchmark";

/// Either the literal `"default_benchmark"` or an explicit list of sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sites {
    Named(String),
    List(Vec<SiteSpec>),
}

impl Default for Sites {
    fn default() -> Self {
        Sites::Named(DEFAULT_BENCHMARK.to_string())
    }
}

impl Sites {
    pub fn resolve(&self) -> Result<Vec<SiteSpec>> {
        match self {
            Sites::Named(name) if name == DEFAULT_BENCHMARK => Ok(default_benchmark()),
            Sites::Named(name) => Err(Error::Config(format!(
                "sites = \"{name}\": the only named site set is \"{DEFAULT_BENCHMARK}\""
            ))),
            Sites::List(list) => Ok(list.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub redraws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            redraws: DEFAULT_REDRAWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub scenarios: Vec<Scenario>,
    pub sites: Sites,
    pub vit: ViTConfig,
    pub train: TrainConfig,
    pub ssl: SSLConfig,
    pub federation: FederationConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale settings for 32x32 single-channel images.
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            scenarios: Scenario::ALL.to_vec(),
            sites: Sites::default(),
            vit: ViTConfig {
                patch_size: 8,
                ..ViTConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            ssl: SSLConfig {
                iterations: 2000,
                learning_rate: 1e-3,
                ..SSLConfig::default()
            },
            federation: FederationConfig {
                max_rounds: 10,
                ..FederationConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.train.validate()?;
        self.ssl.validate()?;
        self.federation.validate()?;
        if self.vit.channels != 1 {
            return Err(Error::Config("vit.channels must be 1 for the synthetic radiographs".into()));
        }
        if self.vit.num_labels != 2 {
            return Err(Error::Config("vit.num_labels must be 2 (pneumonia, no_finding)".into()));
        }
        if self.eval.redraws == 0 {
            return Err(Error::Config("eval.redraws must be >= 1".into()));
        }
        let specs = self.sites.resolve()?;
        if specs.is_empty() {
            return Err(Error::Config("at least one site is required".into()));
        }
        let mut ids: Vec<&str> = specs.iter().map(|s| s.site_id.as_str()).collect();
        for s in &specs {
            s.validate()?;
        }
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate site id `{}`", w[0])));
        }
        Ok(())
    }

    /// The config with the site list expanded, as echoed next to the results.
    pub fn resolved(&self) -> Result<Self> {
        Ok(Self {
            sites: Sites::List(self.sites.resolve()?),
            ..self.clone()
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("config serialization: {e}")))
    }
}
