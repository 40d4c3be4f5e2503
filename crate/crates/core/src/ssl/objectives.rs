//! Untracked reference forms of the distillation objectives, plus the
//! Sinkhorn-Knopp balancing used for teacher targets.

use super::config::SSLConfig;
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Real, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;
/// Lower bound on exponentiated teacher scores, keeping Sinkhorn inputs positive.
const EXP_FLOOR: f64 = 1e-30;

fn rows<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [k] => Ok((1, k)),
        [n, k] => Ok((n, k)),
        _ => Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Alternating row and column normalization of a positive `[B, K]` matrix.
/// Each round scales rows to sum 1, then columns to sum `B / K`; a final row
/// step leaves every row a distribution.
pub fn sinkhorn_knopp<T: Real>(scores: &Tensor<T>, iters: usize) -> Result<Tensor<T>> {
    let (b, k) = rows(scores, "sinkhorn_knopp")?;
    if let Some(v) = scores.data().iter().find(|v| !(**v > T::zero() && v.is_finite())) {
        return Err(Error::Domain {
            op: "sinkhorn_knopp",
            detail: format!("entries must be positive and finite, found {v:?}"),
        });
    }
    let mut q = scores.data().to_vec();
    let normalize_rows = |q: &mut [T]| {
        for row in q.chunks_mut(k) {
            let s: T = row.iter().copied().sum();
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
    };
    let col_target = T::of(b as f64 / k as f64);
    for _ in 0..iters {
        normalize_rows(&mut q);
        let mut col = vec![T::zero(); k];
        for row in q.chunks(k) {
            for (c, &v) in col.iter_mut().zip(row) {
                *c = *c + v;
            }
        }
        for row in q.chunks_mut(k) {
            for (v, &c) in row.iter_mut().zip(&col) {
                *v = *v * col_target / c;
            }
        }
    }
    normalize_rows(&mut q);
    Ok(Tensor::from_parts(scores.shape().to_vec(), q))
}

/// Student distribution: row-wise `softmax(scores / temperature)`.
pub fn student_probs<T: Real>(scores: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let (_, k) = rows(scores, "student_probs")?;
    let inv = T::of(1.0 / temperature);
    let mut out: Vec<T> = scores.data().iter().map(|&s| s * inv).collect();
    for row in out.chunks_mut(k) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(scores.shape().to_vec(), out))
}

/// Teacher distribution: Sinkhorn-balanced `exp(scores / temperature)`.
/// Row maxima are subtracted first; Sinkhorn is invariant to row scaling.
pub fn teacher_probs<T: Real>(scores: &Tensor<T>, temperature: f64, iters: usize) -> Result<Tensor<T>> {
    let (_, k) = rows(scores, "teacher_probs")?;
    let inv = T::of(1.0 / temperature);
    let floor = T::of(EXP_FLOOR);
    let mut e = Vec::with_capacity(scores.numel());
    for row in scores.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        e.extend(row.iter().map(|&s| ((s - max) * inv).exp().max(floor)));
    }
    sinkhorn_knopp(&Tensor::from_parts(scores.shape().to_vec(), e), iters)
}

/// Student probabilities, or Sinkhorn-normalized teacher targets.
pub fn prototype_scores<T: Real>(scores: &Tensor<T>, cfg: &SSLConfig, teacher: bool) -> Result<Tensor<T>> {
    if teacher {
        teacher_probs(scores, cfg.teacher_temperature, cfg.sinkhorn_iters)
    } else {
        student_probs(scores, cfg.student_temperature)
    }
}

fn check_distributions<T: Real>(p: &Tensor<T>, k: usize, what: &str) -> Result<()> {
    let tol = 1e-6 + k as f64 * T::epsilon().as_f64();
    for (i, row) in p.data().chunks(k).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > tol || row.iter().any(|v| *v < T::zero()) {
            return Err(Error::contract(format!("{what} row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

fn row_cross_entropy<T: Real>(pt: &[T], ps: &[T]) -> f64 {
    pt.iter()
        .zip(ps)
        .map(|(&t, &s)| -t.as_f64() * s.as_f64().max(PROB_CLAMP).ln())
        .sum()
}

/// Mean over rows of `-sum_k p_t log p_s`, student probabilities clamped.
pub fn image_level_loss<T: Real>(p_t: &Tensor<T>, p_s: &Tensor<T>) -> Result<f64> {
    if p_t.shape() != p_s.shape() {
        return Err(Error::Dimension {
            op: "image_level_loss",
            lhs: p_t.shape().to_vec(),
            rhs: p_s.shape().to_vec(),
        });
    }
    let (n, k) = rows(p_t, "image_level_loss")?;
    check_distributions(p_t, k, "teacher")?;
    check_distributions(p_s, k, "student")?;
    let total: f64 = p_t
        .data()
        .chunks(k)
        .zip(p_s.data().chunks(k))
        .map(|(t, s)| row_cross_entropy(t, s))
        .sum();
    Ok(total / n as f64)
}

/// Mean cross-entropy over the masked rows of per-patch distributions `[M, K]`.
pub fn patch_level_loss<T: Real>(p_t: &Tensor<T>, p_s: &Tensor<T>, mask: &[bool]) -> Result<f64> {
    if p_t.shape() != p_s.shape() {
        return Err(Error::Dimension {
            op: "patch_level_loss",
            lhs: p_t.shape().to_vec(),
            rhs: p_s.shape().to_vec(),
        });
    }
    let (n, k) = rows(p_t, "patch_level_loss")?;
    if mask.len() != n {
        return Err(Error::Dimension {
            op: "patch_level_loss",
            lhs: vec![n, k],
            rhs: vec![mask.len()],
        });
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Err(Error::contract("patch-level loss needs at least one masked patch"));
    }
    check_distributions(p_t, k, "teacher")?;
    check_distributions(p_s, k, "student")?;
    let total: f64 = p_t
        .data()
        .chunks(k)
        .zip(p_s.data().chunks(k))
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((t, s), _)| row_cross_entropy(t, s))
        .sum();
    Ok(total / masked as f64)
}

/// `alpha * image + beta * patch + koleo_weight * koleo`.
pub fn total_loss(image: f64, patch: f64, koleo: f64, cfg: &SSLConfig) -> f64 {
    cfg.alpha * image + cfg.beta * patch + cfg.koleo_weight * koleo
}

/// `-(1/n) sum_i log(max(eps, min_{j != i} |x_i - x_j|))` over L2-normalized rows.
pub fn koleo_regularizer<T: Real>(embeddings: &Tensor<T>, epsilon: f64) -> Result<f64> {
    crate::autodiff::koleo_value(embeddings, T::of(epsilon)).map(Real::as_f64)
}
