//! Synthetic multi-site chest-radiograph analogs, preprocessing,
//! augmentation, patient-wise splitting, and the on-disk dataset archive.

pub mod archive;
pub mod dataset;
pub mod preprocess;
pub mod split;
pub mod synth;

pub use dataset::{AccessLedger, LabeledDataset, SiteData, LABEL_NAMES};
pub use preprocess::{augment, augment_with, preprocess};
pub use split::{binarize_uncertain, patient_split, RawLabel};
pub use synth::{default_benchmark, synth_generate, Shift, SiteSpec};
