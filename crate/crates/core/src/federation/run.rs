use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use super::aggregate::{aggregate, aggregate_weighted, broadcast};
use super::config::{FederationConfig, InitStrategy};
use super::site::SiteState;
use crate::error::{Error, Result};
use crate::rng;
use crate::vit::checkpoint::{adapt_backbone, load};
use crate::vit::{init_params, ModelParams, ViTConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteRound {
    pub site: String,
    pub train_loss: f64,
    pub val_auroc: f64,
}

/// One line of the round log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub sites: Vec<SiteRound>,
    pub mean_val_auroc: f64,
    pub improved: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub params: ModelParams<f32>,
    /// Round (1-based) that produced `params`; 0 means the initialization.
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome {
    /// Best-by-validation global model.
    pub global: GlobalModel,
    pub logs: Vec<RoundLog>,
}

/// Patience-based stopping on a score that should increase.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Records `score`; returns whether it counts as an improvement.
    pub fn observe(&mut self, score: f64) -> bool {
        if score > self.best + self.min_delta {
            self.best = score;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

/// The round-0 global model. A checkpoint supplies the backbone; anything it
/// lacks comes from the same random initialization `Random` would use.
pub fn init_global(strategy: &InitStrategy, vit: &ViTConfig, seed: u64) -> Result<ModelParams<f32>> {
    let random = init_params(vit, &mut rng::substream(seed, "init", "global"));
    match strategy {
        InitStrategy::Random => Ok(random),
        InitStrategy::Checkpoint(path) => {
            if !path.exists() {
                return Err(Error::Missing { path: path.clone() });
            }
            adapt_backbone(load(path)?, vit, &random)
        }
    }
}

fn abort_round(site: &str, round: usize, err: Error) -> Error {
    match err {
        Error::Divergence { what, .. } => Error::Divergence {
            what: format!("{what} (site `{site}`)"),
            step: round,
        },
        other => other,
    }
}

fn train_sites(sites: &mut [SiteState], cfg: &FederationConfig, round: usize) -> Result<Vec<f64>> {
    let n = sites.len();
    if !cfg.parallel || n == 1 {
        return sites
            .iter_mut()
            .map(|s| s.train_epoch().map_err(|e| abort_round(&s.site_id, round, e)))
            .collect();
    }
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for (i, site) in sites.iter_mut().enumerate() {
            let tx = tx.clone();
            let delay = cfg.jitter.map(|j| {
                let ms = rng::indexed_stream(j.seed, (round * n + i) as u64).random_range(0..=j.max_ms);
                Duration::from_millis(ms)
            });
            scope.spawn(move || {
                let result = site.train_epoch();
                if let Some(d) = delay {
                    std::thread::sleep(d);
                }
                // the receiver outlives the scope
                let _ = tx.send((i, result));
            });
        }
    });
    drop(tx);
    let mut losses = vec![f64::NAN; n];
    let mut first_error = None;
    for (i, result) in rx {
        match result {
            Ok(loss) => losses[i] = loss,
            Err(e) => {
                first_error.get_or_insert((i, e));
            }
        }
    }
    match first_error {
        Some((i, e)) => Err(abort_round(&sites[i].site_id, round, e)),
        None => Ok(losses),
    }
}

/// FedAvg: broadcast, one local epoch per site, aggregate, validate; repeated
/// for at most `max_rounds` rounds or until the mean validation AUROC stops
/// improving. Returns the best-by-validation global model.
pub fn run_federation(
    sites: &mut [SiteState],
    init: ModelParams<f32>,
    cfg: &FederationConfig,
    mut on_round: impl FnMut(&RoundLog) -> Result<()>,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    if sites.is_empty() {
        return Err(Error::Config("federation needs at least one site".into()));
    }
    let sizes: Vec<f64> = sites.iter().map(|s| s.train_len() as f64).collect();
    let mut global = init;
    let mut best = GlobalModel {
        params: global.clone(),
        round: 0,
    };
    let mut improved_ever = false;
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut logs = Vec::new();
    for round in 1..=cfg.max_rounds {
        let start = Instant::now();
        broadcast(&global, sites);
        let losses = train_sites(sites, cfg, round)?;
        let updates: Vec<(&str, &ModelParams<f32>)> = sites.iter().map(|s| (s.site_id.as_str(), &s.params)).collect();
        global = if cfg.size_weighted {
            aggregate_weighted(&updates, &sizes)?
        } else {
            aggregate(&updates)?
        };
        let mut site_logs = Vec::with_capacity(sites.len());
        for (site, loss) in sites.iter().zip(losses) {
            site_logs.push(SiteRound {
                site: site.site_id.clone(),
                train_loss: loss,
                val_auroc: site.validation_auroc(&global)?,
            });
        }
        let mean = mean_defined(site_logs.iter().map(|s| s.val_auroc));
        let improved = stopper.observe(mean);
        if improved || !improved_ever {
            best = GlobalModel {
                params: global.clone(),
                round,
            };
            improved_ever |= improved;
        }
        let log = RoundLog {
            round,
            sites: site_logs,
            mean_val_auroc: mean,
            improved,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_round(&log)?;
        logs.push(log);
        if stopper.should_stop() {
            break;
        }
    }
    Ok(FederationOutcome { global: best, logs })
}

/// Single-site training for at most `epochs` epochs with the optimizer
/// resets and stopping rule of a federation of one.
pub fn run_local_only(
    site: &mut SiteState,
    init: ModelParams<f32>,
    epochs: usize,
    cfg: &FederationConfig,
    mut on_epoch: impl FnMut(&RoundLog) -> Result<()>,
) -> Result<FederationOutcome> {
    FederationConfig {
        max_rounds: epochs.max(1),
        ..cfg.clone()
    }
    .validate()?;
    let mut current = init;
    let mut best = GlobalModel {
        params: current.clone(),
        round: 0,
    };
    let mut improved_ever = false;
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut logs = Vec::new();
    for epoch in 1..=epochs {
        let start = Instant::now();
        site.params = current;
        site.optimizer.reset();
        let loss = site.train_epoch().map_err(|e| abort_round(&site.site_id, epoch, e))?;
        current = site.params.clone();
        let val = site.validation_auroc(&current)?;
        let improved = stopper.observe(val);
        if improved || !improved_ever {
            best = GlobalModel {
                params: current.clone(),
                round: epoch,
            };
            improved_ever |= improved;
        }
        let log = RoundLog {
            round: epoch,
            sites: vec![SiteRound {
                site: site.site_id.clone(),
                train_loss: loss,
                val_auroc: val,
            }],
            mean_val_auroc: val,
            improved,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log)?;
        logs.push(log);
        if stopper.should_stop() {
            break;
        }
    }
    Ok(FederationOutcome { global: best, logs })
}

fn mean_defined(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
