use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label columns, in target order.
pub const LABEL_NAMES: [&str; 2] = ["pneumonia", "no_finding"];

/// Single-channel images in `[0, 1]` with two binary labels per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor<f32>,
    labels: Vec<[bool; 2]>,
    patient_ids: Vec<String>,
}

impl LabeledDataset {
    /// `images` must be `[n, 1, H, W]` with one label pair and patient id per image.
    pub fn new(images: Tensor<f32>, labels: Vec<[bool; 2]>, patient_ids: Vec<String>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::contract(format!("dataset images must be [n,1,H,W], got {shape:?}")));
        }
        if labels.len() != shape[0] || patient_ids.len() != shape[0] {
            return Err(Error::contract(format!(
                "{} images but {} label pairs and {} patient ids",
                shape[0],
                labels.len(),
                patient_ids.len()
            )));
        }
        if let Some(i) = labels.iter().position(|l| l[0] && l[1]) {
            return Err(Error::contract(format!("image {i} is both pneumonia and no-finding")));
        }
        Ok(Self {
            images,
            labels,
            patient_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W)` of every image.
    pub fn dims(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let (h, w) = self.dims();
        &self.images.data()[i * h * w..(i + 1) * h * w]
    }

    pub fn labels(&self) -> &[[bool; 2]] {
        &self.labels
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    /// One boolean column per entry of [`LABEL_NAMES`].
    pub fn label_columns(&self) -> Vec<Vec<bool>> {
        (0..LABEL_NAMES.len())
            .map(|c| self.labels.iter().map(|l| l[c]).collect())
            .collect()
    }

    pub fn count(&self, column: usize) -> usize {
        self.labels.iter().filter(|l| l[column]).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (h, w) = self.dims();
        let mut data = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self {
            images: Tensor::from_parts(vec![indices.len(), 1, h, w], data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            patient_ids: indices.iter().map(|&i| self.patient_ids[i].clone()).collect(),
        }
    }

    /// Images and float targets for a minibatch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let (h, w) = self.dims();
        let mut data = Vec::with_capacity(indices.len() * h * w);
        let mut targets = Vec::with_capacity(indices.len() * 2);
        for &i in indices {
            data.extend_from_slice(self.image(i));
            targets.extend(self.labels[i].iter().map(|&y| if y { 1.0 } else { 0.0 }));
        }
        (
            Tensor::from_parts(vec![indices.len(), 1, h, w], data),
            Tensor::from_parts(vec![indices.len(), 2], targets),
        )
    }
}

/// Counts dataset reads, split by whether the reader owned the data.
#[derive(Debug, Default)]
pub struct AccessLedger {
    own: AtomicUsize,
    cross: AtomicUsize,
}

impl AccessLedger {
    pub fn own_reads(&self) -> usize {
        self.own.load(Ordering::Relaxed)
    }

    pub fn cross_site_reads(&self) -> usize {
        self.cross.load(Ordering::Relaxed)
    }
}

/// A site's dataset handle. Every access names the reader, so tests can
/// assert that no site ever touched another site's data.
#[derive(Debug, Clone)]
pub struct SiteData {
    owner: String,
    data: Arc<LabeledDataset>,
    ledger: Arc<AccessLedger>,
}

impl SiteData {
    pub fn new(owner: impl Into<String>, data: LabeledDataset, ledger: Arc<AccessLedger>) -> Self {
        Self {
            owner: owner.into(),
            data: Arc::new(data),
            ledger,
        }
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn ledger(&self) -> &Arc<AccessLedger> {
        &self.ledger
    }

    pub fn read(&self, reader: &str) -> &LabeledDataset {
        if reader == self.owner {
            self.ledger.own.fetch_add(1, Ordering::Relaxed);
        } else {
            self.ledger.cross.fetch_add(1, Ordering::Relaxed);
        }
        &self.data
    }
}
