//! AdamW with decoupled weight decay and bias correction.

use std::collections::BTreeMap;

use super::config::TrainConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: usize,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new();
    }
}

/// One AdamW update of every parameter that has a gradient.
///
/// All gradients are checked for non-finite values before anything is
/// modified, so a failed step leaves `params` and `state` untouched.
pub fn adamw_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Divergence {
                what: format!("gradient of `{name}`"),
                step: state.step + 1,
            });
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let lr = T::of(cfg.learning_rate);
    let decay = T::one() - lr * T::of(cfg.weight_decay);
    let eps = T::of(cfg.epsilon);
    let correct1 = T::one() - b1.powi(t);
    let correct2 = T::one() - b2.powi(t);

    for (name, g) in grads {
        let w = params.get_mut(name)?;
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((wi, mi), vi), &gi) in w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / correct1;
            let v_hat = *vi / correct2;
            *wi = *wi * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
