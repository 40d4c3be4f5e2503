use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{FederationConfig, InitStrategy};
use super::run::{init_global, run_federation, run_local_only, RoundLog};
use super::site::{SiteState, EVAL_CHUNK};
use crate::data::{SiteData, LABEL_NAMES};
use crate::error::{Error, Result};
use crate::eval::{bootstrap_report, MetricReport, ScoredSet};
use crate::rng;
use crate::vit::{predict_proba, ModelParams, TrainConfig, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "local")]
    Local,
    #[serde(rename = "fl")]
    Fl,
    #[serde(rename = "ssl-fl")]
    SslFl,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Local, Scenario::Fl, Scenario::SslFl];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Local => "local",
            Scenario::Fl => "fl",
            Scenario::SslFl => "ssl-fl",
        }
    }

    /// Column heading in reports.
    pub fn title(self) -> &'static str {
        match self {
            Scenario::Local => "Local",
            Scenario::Fl => "FL",
            Scenario::SslFl => "SSL+FL",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}` (expected local, fl or ssl-fl)")))
    }
}

/// A site's training and held-out test handles.
#[derive(Debug, Clone)]
pub struct SiteInput {
    pub train: SiteData,
    pub test: SiteData,
}

impl SiteInput {
    pub fn id(&self) -> &str {
        self.train.owner()
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    pub vit: ViTConfig,
    pub train: TrainConfig,
    pub federation: FederationConfig,
    pub seed: u64,
    pub redraws: usize,
    /// Pretrained backbone; required by [`Scenario::SslFl`].
    pub ssl_checkpoint: Option<PathBuf>,
}

/// Test-set scores of one site under one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteResult {
    pub site: String,
    pub sets: Vec<ScoredSet>,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub scenario: Scenario,
    /// `("global", params)` for federated scenarios, one entry per site for Local.
    pub models: Vec<(String, ModelParams<f32>)>,
    pub logs: Vec<(String, Vec<RoundLog>)>,
    pub results: Vec<SiteResult>,
}

/// Seed shared by every scenario's bootstrap at `site`, so paired
/// comparisons resample the same test cases.
pub fn bootstrap_seed(seed: u64, site: &str) -> u64 {
    rng::derive_seed(seed, "bootstrap", site)
}

/// Scores of `params` on the site's test split, one set per label.
pub fn score_test_set(params: &ModelParams<f32>, vit: &ViTConfig, site: &SiteInput) -> Result<Vec<ScoredSet>> {
    let data = site.test.read(site.id());
    let probs = predict_proba(params, vit, data.images(), EVAL_CHUNK)?;
    let k = vit.num_labels;
    data.label_columns()
        .into_iter()
        .enumerate()
        .map(|(c, col)| {
            let scores = probs.data().iter().skip(c).step_by(k).map(|&p| p as f64).collect();
            ScoredSet::new(LABEL_NAMES[c], scores, col)
        })
        .collect()
}

fn evaluate(params: &ModelParams<f32>, site: &SiteInput, opts: &ScenarioOptions) -> Result<SiteResult> {
    let sets = score_test_set(params, &opts.vit, site)?;
    let report = bootstrap_report(&sets, opts.redraws, bootstrap_seed(opts.seed, site.id()))?;
    Ok(SiteResult {
        site: site.id().to_string(),
        sets,
        report,
    })
}

/// Trains and evaluates one scenario. Local trains a model per site from the
/// shared random initialization; FL and SSL+FL train one global model and
/// differ only in where round 0 comes from.
pub fn run_scenario(
    scenario: Scenario,
    sites: &[SiteInput],
    opts: &ScenarioOptions,
    mut on_round: impl FnMut(&str, &RoundLog) -> Result<()>,
) -> Result<ScenarioOutcome> {
    opts.vit.validate()?;
    opts.train.validate()?;
    opts.federation.validate()?;
    if sites.is_empty() {
        return Err(Error::Config("no sites configured".into()));
    }
    let strategy = match scenario {
        Scenario::Local | Scenario::Fl => opts.federation.init.clone(),
        Scenario::SslFl => {
            let path = opts
                .ssl_checkpoint
                .clone()
                .ok_or_else(|| Error::Config("SSL+FL needs a pretrained checkpoint".into()))?;
            InitStrategy::Checkpoint(path)
        }
    };
    let init = init_global(&strategy, &opts.vit, opts.seed)?;
    let mut states = sites
        .iter()
        .map(|s| {
            SiteState::new(
                &s.train,
                opts.federation.validation_fraction,
                &opts.vit,
                &opts.train,
                init.clone(),
                opts.seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut models = Vec::new();
    let mut logs = Vec::new();
    let mut results = Vec::new();
    match scenario {
        Scenario::Local => {
            for (state, site) in states.iter_mut().zip(sites) {
                let id = site.id().to_string();
                let outcome = run_local_only(state, init.clone(), opts.federation.max_rounds, &opts.federation, |log| on_round(&id, log))?;
                results.push(evaluate(&outcome.global.params, site, opts)?);
                models.push((id.clone(), outcome.global.params));
                logs.push((id, outcome.logs));
            }
        }
        Scenario::Fl | Scenario::SslFl => {
            let outcome = run_federation(&mut states, init, &opts.federation, |log| on_round("global", log))?;
            for site in sites {
                results.push(evaluate(&outcome.global.params, site, opts)?);
            }
            models.push(("global".to_string(), outcome.global.params));
            logs.push(("global".to_string(), outcome.logs));
        }
    }
    Ok(ScenarioOutcome {
        scenario,
        models,
        logs,
        results,
    })
}
