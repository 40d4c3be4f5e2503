use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the vision transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_labels: usize,
    pub channels: usize,
    /// Hidden width of an optional extra head layer; `None` is a single linear head.
    #[serde(default)]
    pub head_hidden: Option<usize>,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 64,
            num_labels: 2,
            channels: 1,
            head_hidden: None,
        }
    }
}

impl ViTConfig {
    /// ViT-Base/16 at 224 px with three channels and two labels.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_dim: 3072,
            num_labels: 2,
            channels: 3,
            head_hidden: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("num_labels", self.num_labels),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("vit.{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "num_heads {} does not divide embed_dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::Config("vit.head_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count including the classification token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Same architecture at a different input resolution.
    pub fn with_image_size(&self, image_size: usize) -> Self {
        Self {
            image_size,
            ..self.clone()
        }
    }

    /// Trainable parameter count, computed from the shapes alone.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let linear = |i: usize, o: usize| i * o + o;
        let embed = linear(self.patch_dim(), d) + self.seq_len() * d + d;
        let layer = 4 * linear(d, d) + linear(d, self.ffn_dim) + linear(self.ffn_dim, d) + 4 * d;
        let head = match self.head_hidden {
            None => linear(d, self.num_labels),
            Some(h) => linear(d, h) + linear(h, self.num_labels),
        };
        embed + self.num_layers * layer + 2 * d + head
    }
}

/// Local optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs_per_round: usize,
    /// Rotation/flip augmentation of training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs_per_round: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        // zero is allowed: it freezes the model, which the protocol tests rely on
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("train.learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config(
                "weight_decay must be >= 0 and epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}
