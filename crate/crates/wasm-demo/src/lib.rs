//! Browser bindings over the core crate. Every function takes plain numbers
//! or arrays and returns JSON, so the page needs no generated glue types.

use fedssl::data::synth::{render, Finding};
use fedssl::data::{default_benchmark, preprocess};
use fedssl::eval::{auroc, roc_curve, trapezoid_area, youden_threshold, ScoredSet};
use fedssl::rng;
use fedssl::ssl::{prototype_scores, SSLConfig};
use fedssl::tensor::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

#[derive(Serialize)]
pub struct RocView {
    pub auroc: f64,
    pub trapezoid: f64,
    pub curve: Vec<(f64, f64)>,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub youden_j: f64,
}

pub fn roc_view(scores: &[f64], labels: &[u8]) -> fedssl::error::Result<RocView> {
    let set = ScoredSet::new("label", scores.to_vec(), labels.iter().map(|&l| l != 0).collect())?;
    let curve = roc_curve(&set)?;
    let op = youden_threshold(&set)?;
    Ok(RocView {
        auroc: auroc(&set)?,
        trapezoid: trapezoid_area(&curve),
        curve,
        threshold: op.threshold,
        sensitivity: op.sensitivity,
        specificity: op.specificity,
        youden_j: op.youden_j(),
    })
}

/// ROC curve, AUROC and the Youden operating point of a scored set.
#[wasm_bindgen]
pub fn roc_explorer(scores: &[f64], labels: &[u8]) -> Result<String, JsError> {
    to_json(&roc_view(scores, labels).map_err(js_err)?)
}

#[derive(Serialize)]
pub struct SiteImage {
    pub site: String,
    pub raw_size: usize,
    pub raw: Vec<f32>,
    pub size: usize,
    pub preprocessed: Vec<f32>,
}

pub fn site_image(site: usize, finding: &str, seed: u64, size: usize) -> fedssl::error::Result<SiteImage> {
    let specs = default_benchmark();
    let spec = specs
        .get(site)
        .ok_or_else(|| fedssl::error::Error::Config(format!("site index {site} out of range 0..{}", specs.len())))?;
    let finding = match finding {
        "pneumonia" => Finding::Pneumonia,
        "no_finding" => Finding::NoFinding,
        "other" => Finding::Other,
        other => return Err(fedssl::error::Error::Config(format!("unknown finding `{other}`"))),
    };
    let raw_size = spec.raw_size;
    let raw = render(finding, &spec.shift, raw_size, &mut rng::substream(seed, "demo", &spec.site_id));
    let tensor = Tensor::new(vec![raw_size, raw_size], raw.clone())?;
    let preprocessed = preprocess(&tensor, size)?.into_data();
    Ok(SiteImage {
        site: spec.site_id.clone(),
        raw_size,
        raw,
        size,
        preprocessed,
    })
}

/// One synthetic radiograph from a benchmark site, raw and preprocessed.
#[wasm_bindgen]
pub fn synth_site_image(site: usize, finding: &str, seed: u64, size: usize) -> Result<String, JsError> {
    to_json(&site_image(site, finding, seed, size).map_err(js_err)?)
}

#[wasm_bindgen]
pub fn site_names() -> String {
    let names: Vec<String> = default_benchmark().into_iter().map(|s| s.site_id).collect();
    serde_json::to_string(&names).expect("strings serialize")
}

#[derive(Serialize)]
pub struct Assignment {
    pub student: Vec<Vec<f64>>,
    pub teacher: Vec<Vec<f64>>,
    pub teacher_column_sums: Vec<f64>,
}

pub fn assignment(scores: &[f64], rows: usize, temperature: f64, iters: usize) -> fedssl::error::Result<Assignment> {
    if rows == 0 || scores.is_empty() || !scores.len().is_multiple_of(rows) {
        return Err(fedssl::error::Error::Config(format!("{} scores do not form {rows} rows", scores.len())));
    }
    let k = scores.len() / rows;
    let cfg = SSLConfig {
        student_temperature: temperature,
        teacher_temperature: temperature,
        sinkhorn_iters: iters,
        ..SSLConfig::default()
    };
    let t = Tensor::new(vec![rows, k], scores.to_vec())?;
    let split = |m: Tensor<f64>| m.data().chunks(k).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let teacher = split(prototype_scores(&t, &cfg, true)?);
    let teacher_column_sums = (0..k).map(|c| teacher.iter().map(|r| r[c]).sum()).collect();
    Ok(Assignment {
        student: split(prototype_scores(&t, &cfg, false)?),
        teacher,
        teacher_column_sums,
    })
}

/// Student softmax and teacher Sinkhorn-Knopp assignments of a score matrix
/// at one temperature.
#[wasm_bindgen]
pub fn prototype_assignment(scores: &[f64], rows: usize, temperature: f64, iters: usize) -> Result<String, JsError> {
    to_json(&assignment(scores, rows, temperature, iters).map_err(js_err)?)
}
