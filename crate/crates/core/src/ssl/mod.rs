//! Self-supervised teacher-student pretraining with image-level and masked
//! patch-level distillation, Sinkhorn-balanced teacher targets, and a KoLeo
//! spreading term.

pub mod config;
pub mod objectives;
pub mod pretrain;
pub mod views;

pub use config::SSLConfig;
pub use objectives::{
    image_level_loss, koleo_regularizer, patch_level_loss, prototype_scores, sinkhorn_knopp, total_loss,
};
pub use pretrain::{ema_update, pretrain, PretrainRecord, TeacherStudent};
pub use views::{make_views, mask_patches};
