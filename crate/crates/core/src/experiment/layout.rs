use std::path::{Path, PathBuf};

use crate::federation::Scenario;

/// Paths of every artifact under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn site_split(&self, site: &str, split: &str) -> PathBuf {
        self.datasets().join(site).join(split)
    }

    pub fn ssl_checkpoint(&self) -> PathBuf {
        self.root.join("ssl.ckpt")
    }

    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("pretrain.jsonl")
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.resolved")
    }

    pub fn scenario(&self, scenario: Scenario) -> PathBuf {
        self.root.join(scenario.as_str())
    }

    pub fn site_dir(&self, scenario: Scenario, site: &str) -> PathBuf {
        self.scenario(scenario).join(site)
    }

    pub fn model(&self, scenario: Scenario, model: &str) -> PathBuf {
        self.site_dir(scenario, model).join("model.ckpt")
    }

    pub fn scores(&self, scenario: Scenario, site: &str) -> PathBuf {
        self.site_dir(scenario, site).join("scores.csv")
    }

    pub fn roc(&self, scenario: Scenario, site: &str, label: &str) -> PathBuf {
        self.site_dir(scenario, site).join(format!("roc_{label}.csv"))
    }

    pub fn rounds(&self, scenario: Scenario) -> PathBuf {
        self.scenario(scenario).join("rounds.jsonl")
    }

    pub fn results(&self, scenario: Scenario) -> PathBuf {
        self.scenario(scenario).join("results.csv")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}
