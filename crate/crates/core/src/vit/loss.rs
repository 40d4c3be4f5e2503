use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

/// Positive-term weight per label: `n_neg / n_pos`, so rarer positives weigh more.
pub fn class_weights(columns: &[Vec<bool>], names: &[&str]) -> Result<Vec<f64>> {
    columns
        .iter()
        .enumerate()
        .map(|(c, col)| {
            let positives = col.iter().filter(|&&y| y).count();
            let negatives = col.len() - positives;
            if positives == 0 || negatives == 0 {
                return Err(Error::DegenerateLabel {
                    label: names.get(c).map_or_else(|| format!("#{c}"), |s| s.to_string()),
                    positives,
                    negatives,
                });
            }
            Ok(negatives as f64 / positives as f64)
        })
        .collect()
}

/// Mean over batch and labels of
/// `-(w_c * y * log p + (1 - y) * log(1 - p))` with `p = sigmoid(z)` clamped.
pub fn weighted_bce<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &Tensor<T>,
    weights: &[f64],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape != targets.shape() || shape.len() != 2 || shape[1] != weights.len() {
        return Err(Error::Dimension {
            op: "weighted_bce",
            lhs: shape,
            rhs: targets.shape().to_vec(),
        });
    }
    if let Some(bad) = targets.data().iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(Error::contract(format!("non-binary target {bad:?}")));
    }
    let labels = weights.len();
    let pos_coef = Tensor::from_fn(&shape, |i| targets.data()[i] * T::of(weights[i % labels]));
    let neg_coef = targets.map(|y| T::one() - y);

    let eps = T::of(PROB_CLAMP);
    let p = tape.sigmoid(logits)?;
    let p = tape.clamp(p, eps, T::one() - eps)?;
    let log_p = tape.log(p)?;
    let one_minus = tape.affine(p, -T::one(), T::one())?;
    let log_q = tape.log(one_minus)?;
    let pos = tape.constant(pos_coef);
    let neg = tape.constant(neg_coef);
    let a = tape.mul(log_p, pos)?;
    let b = tape.mul(log_q, neg)?;
    let total = tape.add(a, b)?;
    let mean = tape.mean(total)?;
    tape.scale(mean, -T::one())
}
