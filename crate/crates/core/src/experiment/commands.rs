use std::collections::BTreeMap;
use std::fmt::Write;
use std::sync::Arc;

use serde_json::json;

use super::config::ExperimentConfig;
use super::layout::Layout;
use super::table::{self, fmt6, ReportRow};
use crate::data::{archive, synth_generate, AccessLedger, SiteData, LABEL_NAMES};
use crate::error::{Error, Result};
use crate::eval::{bootstrap_compare_labels, roc_curve, ScoredSet};
use crate::federation::{bootstrap_seed, run_scenario, RoundLog, Scenario, ScenarioOptions, SiteInput};
use crate::rng;
use crate::ssl::{pretrain, PretrainRecord};
use crate::tensor::Tensor;
use crate::vit::checkpoint;

/// Summary of a finished `run`, for the caller to print.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub scenario: Scenario,
    pub rows: Vec<ReportRow>,
}

fn echo_config(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    crate::io::write_atomic(&layout.config_echo(), cfg.resolved()?.to_toml()?.as_bytes())
}

/// Writes one train and one test archive per configured site.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    let mut ids = Vec::new();
    for mut spec in cfg.sites.resolve()? {
        spec.seed = rng::derive_seed(cfg.seed, "generate", &format!("{}/{}", spec.site_id, spec.seed));
        let (train, test) = synth_generate(&spec, cfg.vit.image_size)?;
        for (split, data) in [("train", &train), ("test", &test)] {
            let meta = json!({
                "site": spec,
                "split": split,
                "master_seed": cfg.seed,
                "image_size": cfg.vit.image_size,
                "n_images": data.len(),
                "n_patients": count_patients(data.patient_ids()),
                "positives": { LABEL_NAMES[0]: data.count(0), LABEL_NAMES[1]: data.count(1) },
            });
            archive::write_archive(&layout.site_split(&spec.site_id, split), data, &meta)?;
        }
        ids.push(spec.site_id);
    }
    echo_config(cfg, &layout)?;
    Ok(ids)
}

fn count_patients(ids: &[String]) -> usize {
    let mut v: Vec<&String> = ids.iter().collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

fn load_sites(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<SiteInput>> {
    cfg.sites
        .resolve()?
        .iter()
        .map(|spec| {
            let id = &spec.site_id;
            let load = |split: &str| -> Result<SiteData> {
                let (data, _) = archive::read_archive(&layout.site_split(id, split))?;
                let (h, w) = data.dims();
                if (h, w) != (cfg.vit.image_size, cfg.vit.image_size) {
                    return Err(Error::Config(format!(
                        "site `{id}` was generated at {h}x{w} but vit.image_size is {}; rerun generate",
                        cfg.vit.image_size
                    )));
                }
                Ok(SiteData::new(id.clone(), data, Arc::new(AccessLedger::default())))
            };
            Ok(SiteInput {
                train: load("train")?,
                test: load("test")?,
            })
        })
        .collect()
}

/// Pretrains on the union of every site's training images, labels dropped.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PretrainRecord>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    let sites = load_sites(cfg, &layout)?;
    let mut pixels = Vec::new();
    let mut n = 0;
    for site in &sites {
        let data = site.train.read(site.id());
        pixels.extend_from_slice(data.images().data());
        n += data.len();
    }
    let size = cfg.vit.image_size;
    let pool = Tensor::new(vec![n, 1, size, size], pixels)?;
    let mut records = Vec::with_capacity(cfg.ssl.iterations);
    let params = pretrain(&pool, &cfg.vit, &cfg.ssl, cfg.seed, |r| {
        records.push(r.clone());
        Ok(())
    })?;
    let mut log = String::new();
    for r in &records {
        let line = serde_json::to_string(r).map_err(|e| Error::contract(e.to_string()))?;
        let _ = writeln!(log, "{line}");
    }
    crate::io::write_atomic(&layout.pretrain_log(), log.as_bytes())?;
    checkpoint::save(&layout.ssl_checkpoint(), &params)?;
    echo_config(cfg, &layout)?;
    Ok(records)
}

/// Trains and evaluates one scenario and writes its artifacts. `on_round`
/// sees every round log as it happens (model name, log).
pub fn cmd_run(
    cfg: &ExperimentConfig,
    scenario: Scenario,
    mut on_round: impl FnMut(&str, &RoundLog),
) -> Result<RunSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    let ckpt = layout.ssl_checkpoint();
    if scenario == Scenario::SslFl && !ckpt.exists() {
        return Err(Error::Missing { path: ckpt });
    }
    let sites = load_sites(cfg, &layout)?;
    let opts = ScenarioOptions {
        vit: cfg.vit.clone(),
        train: cfg.train.clone(),
        federation: cfg.federation.clone(),
        seed: cfg.seed,
        redraws: cfg.eval.redraws,
        ssl_checkpoint: (scenario == Scenario::SslFl).then_some(ckpt),
    };
    let outcome = run_scenario(scenario, &sites, &opts, |model, log| {
        on_round(model, log);
        Ok(())
    })?;

    let mut rounds = String::new();
    for (model, logs) in &outcome.logs {
        for log in logs {
            let _ = writeln!(rounds, "{}", round_line(model, log)?);
        }
    }
    crate::io::write_atomic(&layout.rounds(scenario), rounds.as_bytes())?;
    for (model, params) in &outcome.models {
        checkpoint::save(&layout.model(scenario, model), params)?;
    }
    for result in &outcome.results {
        crate::io::write_atomic(&layout.scores(scenario, &result.site), write_scores(&result.sets).as_bytes())?;
        for set in &result.sets {
            let mut csv = String::from("fpr,tpr\n");
            for (fpr, tpr) in roc_curve(set)? {
                let _ = writeln!(csv, "{},{}", fmt6(fpr), fmt6(tpr));
            }
            crate::io::write_atomic(&layout.roc(scenario, &result.site, &set.label_name), csv.as_bytes())?;
        }
    }

    let mut rows = Vec::new();
    for result in &outcome.results {
        let vs_local = compare_with_local(cfg, &layout, scenario, &result.site, &result.sets)?;
        rows.extend(table::rows_for(scenario, &result.site, &result.report, vs_local.as_ref(), cfg.seed));
    }
    crate::io::write_atomic(&layout.results(scenario), table::write_csv(&rows).as_bytes())?;
    echo_config(cfg, &layout)?;
    Ok(RunSummary { scenario, rows })
}

/// The round log minus wall-clock time, so reruns are byte-identical.
fn round_line(model: &str, log: &RoundLog) -> Result<String> {
    let mut value = serde_json::to_value(log).map_err(|e| Error::contract(e.to_string()))?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("wall_time_s");
        obj.insert("model".into(), json!(model));
    }
    Ok(value.to_string())
}

/// Paired test against the Local model's saved scores on the same site.
fn compare_with_local(
    cfg: &ExperimentConfig,
    layout: &Layout,
    scenario: Scenario,
    site: &str,
    sets: &[ScoredSet],
) -> Result<Option<(Vec<crate::eval::BootstrapResult>, crate::eval::BootstrapResult)>> {
    if scenario == Scenario::Local {
        return Ok(None);
    }
    let path = layout.scores(Scenario::Local, site);
    if !path.exists() {
        return Ok(None);
    }
    let local = read_scores(&crate::io::read(&path)?, &path.display().to_string())?;
    bootstrap_compare_labels(sets, &local, cfg.eval.redraws, bootstrap_seed(cfg.seed, site)).map(Some)
}

/// `index,<label>_true,<label>_score,...` with scores at full precision:
/// the paired bootstrap is sensitive to ties, so rounding would change it.
pub fn write_scores(sets: &[ScoredSet]) -> String {
    let mut out = String::from("index");
    for s in sets {
        let _ = write!(out, ",{0}_true,{0}_score", s.label_name);
    }
    out.push('\n');
    let n = sets.first().map_or(0, |s| s.len());
    for i in 0..n {
        let _ = write!(out, "{i}");
        for s in sets {
            let _ = write!(out, ",{},{:?}", u8::from(s.labels[i]), s.scores[i]);
        }
        out.push('\n');
    }
    out
}

pub fn read_scores(bytes: &[u8], what: &str) -> Result<Vec<ScoredSet>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Parse(format!("{what} is not UTF-8")))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    if header.first() != Some(&"index") || header.len() % 2 != 1 || header.len() < 3 {
        return Err(Error::Parse(format!("{what}: unexpected header")));
    }
    let names: Vec<String> = header[1..]
        .chunks(2)
        .map(|c| {
            c[0].strip_suffix("_true")
                .filter(|n| c[1].strip_suffix("_score") == Some(n))
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("{what}: unexpected header")))
        })
        .collect::<Result<_>>()?;
    let mut scores = vec![Vec::new(); names.len()];
    let mut labels = vec![Vec::new(); names.len()];
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse(format!("{what} line {}: malformed", lineno + 2));
        if f.len() != header.len() {
            return Err(bad());
        }
        for (c, pair) in f[1..].chunks(2).enumerate() {
            labels[c].push(match pair[0] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            });
            scores[c].push(pair[1].parse::<f64>().map_err(|_| bad())?);
        }
    }
    names
        .into_iter()
        .zip(scores.into_iter().zip(labels))
        .map(|(name, (s, l))| ScoredSet::new(name, s, l))
        .collect()
}

/// Consolidates every scenario present under `out` into `report.csv` and
/// `report.txt`. p-values against Local are recomputed from the saved
/// scores, so the report is current whichever order scenarios ran in.
pub fn cmd_report(out: &std::path::Path) -> Result<String> {
    let layout = Layout::new(out);
    let cfg_path = layout.config_echo();
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let mut rows = Vec::new();
    let mut found = false;
    for scenario in Scenario::ALL {
        let path = layout.results(scenario);
        if !path.exists() {
            continue;
        }
        found = true;
        let text = String::from_utf8(crate::io::read(&path)?)
            .map_err(|_| Error::Parse(format!("{} is not UTF-8", path.display())))?;
        let mut scenario_rows = table::parse_csv(&text)?;
        let mut by_site: BTreeMap<String, Option<(Vec<f64>, f64)>> = BTreeMap::new();
        for row in &scenario_rows {
            if by_site.contains_key(&row.site) {
                continue;
            }
            let scores_path = layout.scores(scenario, &row.site);
            let sets = read_scores(&crate::io::read(&scores_path)?, &scores_path.display().to_string())?;
            let p = compare_with_local(&cfg, &layout, scenario, &row.site, &sets)?
                .map(|(per, avg)| (per.iter().map(|r| r.p_value).collect(), avg.p_value));
            by_site.insert(row.site.clone(), p);
        }
        for row in &mut scenario_rows {
            row.p_vs_local = by_site[&row.site].as_ref().map(|(per, avg)| {
                match LABEL_NAMES.iter().position(|l| *l == row.label) {
                    Some(i) => per[i],
                    None => *avg,
                }
            });
        }
        rows.extend(scenario_rows);
    }
    if !found {
        return Err(Error::Missing {
            path: layout.results(Scenario::Local),
        });
    }
    let text = table::render_text(&rows);
    crate::io::write_atomic(&layout.report_csv(), table::write_csv(&rows).as_bytes())?;
    crate::io::write_atomic(&layout.report_txt(), text.as_bytes())?;
    Ok(text)
}
