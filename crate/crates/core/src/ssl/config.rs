use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Teacher-student pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SSLConfig {
    /// Weight of the image-level (classification token) objective.
    pub alpha: f64,
    /// Weight of the masked patch-level objective.
    pub beta: f64,
    pub koleo_weight: f64,
    pub koleo_epsilon: f64,
    pub ema_momentum: f64,
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub mask_ratio: f64,
    pub prototype_dim: usize,
    /// Hidden width of the two-layer projection head.
    pub head_hidden: usize,
    pub sinkhorn_iters: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `(iteration, image_size)` pairs; the last entry at or before the
    /// current iteration sets the resolution. Empty means the model size.
    pub resolution_schedule: Vec<(usize, usize)>,
    /// Crop, rotation and flip augmentation of the two views.
    pub augment: bool,
    /// Smallest crop side as a fraction of the image side.
    pub crop_min_scale: f64,
}

impl Default for SSLConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            koleo_weight: 0.1,
            koleo_epsilon: 1e-8,
            ema_momentum: 0.996,
            student_temperature: 0.1,
            teacher_temperature: 0.05,
            mask_ratio: 0.3,
            prototype_dim: 64,
            head_hidden: 64,
            sinkhorn_iters: 3,
            iterations: 200,
            batch_size: 32,
            learning_rate: 5e-4,
            weight_decay: 0.04,
            resolution_schedule: Vec::new(),
            augment: true,
            crop_min_scale: 0.6,
        }
    }
}

impl SSLConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("ssl.{msg}")));
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return fail("alpha and beta must be >= 0 with a positive sum");
        }
        if !(self.koleo_weight >= 0.0) || !(self.koleo_epsilon > 0.0) {
            return fail("koleo_weight must be >= 0 and koleo_epsilon > 0");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return fail("ema_momentum must lie in [0, 1]");
        }
        if !(self.student_temperature > 0.0 && self.teacher_temperature > 0.0) {
            return fail("temperatures must be > 0");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail("mask_ratio must lie in (0, 1)");
        }
        if self.prototype_dim == 0 || self.head_hidden == 0 || self.sinkhorn_iters == 0 {
            return fail("prototype_dim, head_hidden and sinkhorn_iters must be >= 1");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2 for the KoLeo term");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning_rate and weight_decay must be >= 0");
        }
        if !(self.crop_min_scale > 0.0 && self.crop_min_scale <= 1.0) {
            return fail("crop_min_scale must lie in (0, 1]");
        }
        if self
            .resolution_schedule
            .windows(2)
            .any(|w| w[1].0 <= w[0].0)
        {
            return fail("resolution_schedule iterations must increase strictly");
        }
        Ok(())
    }

    /// Image size in effect at `iteration`.
    pub fn resolution_at(&self, iteration: usize, base: usize) -> usize {
        self.resolution_schedule
            .iter()
            .take_while(|(start, _)| *start <= iteration)
            .last()
            .map_or(base, |&(_, size)| size)
    }
}
