use rand::seq::SliceRandom;

use crate::data::preprocess::{augment_with, sample_augmentation};
use crate::data::{patient_split, LabeledDataset, SiteData, LABEL_NAMES};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::{auroc, ScoredSet};
use crate::rng;
use crate::tensor::Tensor;
use crate::vit::model::{bind_params, forward};
use crate::vit::{adamw_step, class_weights, predict_proba, weighted_bce, AdamState, ModelParams, TrainConfig, ViTConfig};

pub(crate) const EVAL_CHUNK: usize = 256;

/// One participating institution: its own data handles, its local copy of
/// the model, optimizer moments and random stream.
#[derive(Debug, Clone)]
pub struct SiteState {
    pub site_id: String,
    train_data: SiteData,
    validation: SiteData,
    pub params: ModelParams<f32>,
    pub optimizer: AdamState<f32>,
    rng: rng::Rng,
    pub train: TrainConfig,
    vit: ViTConfig,
    weights: Vec<f64>,
}

/// Result of one epoch at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: ModelParams<f32>,
    pub mean_loss: f64,
}

impl SiteState {
    /// Carves a patient-wise validation split off `data` and prepares the
    /// site for training from `init`.
    pub fn new(
        data: &SiteData,
        validation_fraction: f64,
        vit: &ViTConfig,
        train: &TrainConfig,
        init: ModelParams<f32>,
        seed: u64,
    ) -> Result<Self> {
        let id = data.owner().to_string();
        let full = data.read(&id);
        if full.dims() != (vit.image_size, vit.image_size) {
            return Err(Error::Config(format!(
                "site `{id}` images are {:?}, model expects {}x{}",
                full.dims(),
                vit.image_size,
                vit.image_size
            )));
        }
        let (fit, held) = patient_split(full, validation_fraction, &mut rng::substream(seed, "validation", &id))?;
        let weights = class_weights(&fit.label_columns(), &LABEL_NAMES)?;
        let ledger = data.ledger().clone();
        Ok(Self {
            train_data: SiteData::new(id.clone(), fit, ledger.clone()),
            validation: SiteData::new(id.clone(), held, ledger),
            rng: rng::substream(seed, "site-train", &id),
            site_id: id,
            params: init,
            optimizer: AdamState::new(),
            train: train.clone(),
            vit: vit.clone(),
            weights,
        })
    }

    /// The site's training split (after the validation carve-out).
    pub fn train_data(&self) -> &LabeledDataset {
        self.train_data.read(&self.site_id)
    }

    pub fn train_len(&self) -> usize {
        self.train_data.read(&self.site_id).len()
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.weights
    }

    /// One shuffled pass of minibatch AdamW over the site's training split,
    /// continuing from the current parameters and optimizer state.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let data = self.train_data.read(&self.site_id);
        let (h, w) = data.dims();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.train.batch_size) {
            let (mut images, targets) = data.batch(chunk);
            if self.train.augment {
                for img in images.data_mut().chunks_exact_mut(h * w) {
                    let (angle, flip) = sample_augmentation(&mut self.rng);
                    let out = augment_with(img, h, w, angle, flip);
                    img.copy_from_slice(&out);
                }
            }
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &self.params, true);
            let logits = forward(&mut tape, &bound, &self.vit, &images)?;
            let loss = weighted_bce(&mut tape, logits, &targets, &self.weights)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    what: format!("training loss at site `{}`", self.site_id),
                    step: self.optimizer.step,
                });
            }
            let grads = bound.named_grads(tape.backward(loss)?);
            adamw_step(&mut self.params, &grads, &mut self.optimizer, &self.train)?;
            total += value;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }

    /// Mean AUROC over the labels that have both classes in the validation
    /// split; NaN when none do.
    pub fn validation_auroc(&self, params: &ModelParams<f32>) -> Result<f64> {
        let data = self.validation.read(&self.site_id);
        mean_auroc(params, &self.vit, data.images(), &data.label_columns())
    }
}

/// Mean over labels of the AUROC of `params` on `images`, skipping labels
/// with a single class present.
pub(crate) fn mean_auroc(
    params: &ModelParams<f32>,
    vit: &ViTConfig,
    images: &Tensor<f32>,
    columns: &[Vec<bool>],
) -> Result<f64> {
    let probs = predict_proba(params, vit, images, EVAL_CHUNK)?;
    let k = vit.num_labels;
    let mut sum = 0.0;
    let mut defined = 0;
    for (c, col) in columns.iter().enumerate() {
        let scores = probs.data().iter().skip(c).step_by(k).map(|&p| p as f64).collect();
        let set = ScoredSet::new(LABEL_NAMES[c], scores, col.clone())?;
        if let Ok(a) = auroc(&set) {
            sum += a;
            defined += 1;
        }
    }
    Ok(if defined == 0 { f64::NAN } else { sum / defined as f64 })
}

/// Resets `site` to `global` with fresh optimizer moments and trains one epoch.
/// `global` itself is never modified.
pub fn local_round(site: &mut SiteState, global: &ModelParams<f32>) -> Result<LocalUpdate> {
    site.params.check_same_manifest(global)?;
    site.params = global.clone();
    site.optimizer.reset();
    let mean_loss = site.train_epoch()?;
    Ok(LocalUpdate {
        params: site.params.clone(),
        mean_loss,
    })
}
