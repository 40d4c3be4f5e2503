use super::site::SiteState;
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::vit::ModelParams;

/// Uniform coordinate-wise mean of the site updates, accumulated in double
/// precision in ascending site-id order so the result does not depend on the
/// order updates arrive in.
pub fn aggregate<T: Real>(updates: &[(&str, &ModelParams<T>)]) -> Result<ModelParams<T>> {
    let uniform = vec![1.0; updates.len()];
    aggregate_weighted(updates, &uniform)
}

/// Mean weighted by `weights` (normalized to sum to one).
pub fn aggregate_weighted<T: Real>(updates: &[(&str, &ModelParams<T>)], weights: &[f64]) -> Result<ModelParams<T>> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no site updates to aggregate".into()));
    }
    if weights.len() != updates.len() || weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Aggregation(format!("invalid aggregation weights {weights:?}")));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by(|&a, &b| updates[a].0.cmp(updates[b].0));
    let (first_name, first) = updates[order[0]];
    for &i in &order[1..] {
        let (name, p) = updates[i];
        if p.manifest() != first.manifest() {
            return Err(Error::Aggregation(format!(
                "site `{name}` has a parameter manifest different from site `{first_name}`"
            )));
        }
    }
    let total: f64 = weights.iter().sum();
    let mut out = first.clone();
    for (name, dst) in out.iter_mut() {
        let mut acc = vec![0.0f64; dst.numel()];
        for &i in &order {
            let src = updates[i].1.get(name)?;
            let w = weights[i];
            if w == 1.0 {
                for (a, &v) in acc.iter_mut().zip(src.data()) {
                    *a += v.as_f64();
                }
            } else {
                for (a, &v) in acc.iter_mut().zip(src.data()) {
                    *a += w * v.as_f64();
                }
            }
        }
        for (d, a) in dst.data_mut().iter_mut().zip(acc) {
            *d = T::of(a / total);
        }
    }
    Ok(out)
}

/// Every site adopts `global` and restarts its optimizer moments.
pub fn broadcast(global: &ModelParams<f32>, sites: &mut [SiteState]) {
    for site in sites {
        site.params = global.clone();
        site.optimizer.reset();
    }
}
