//! Vision transformer for multilabel classification: configuration,
//! parameters, forward pass, weighted loss, optimizer, and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;

pub use config::{TrainConfig, ViTConfig};
pub use loss::{class_weights, weighted_bce};
pub use model::{bind_params, forward, predict_proba};
pub use optim::{adamw_step, AdamState};
pub use params::{init_params, resize_pos_embed, Manifest, ModelParams};
