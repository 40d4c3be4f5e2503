//! Whole-model gradient check of the classifier on a tiny configuration.

use fedssl::autodiff::{finite_difference_grad, relative_error, Tape};
use fedssl::rng;
use fedssl::vit::model::{bind_params, forward};
use fedssl::vit::{init_params, weighted_bce, ModelParams, ViTConfig};
use fedssl::Tensor;
use rand::Rng;

use super::gradcheck::{FD_STEP, REL_FLOOR};

pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 16,
        num_labels: 2,
        channels: 1,
        head_hidden: None,
    }
}

pub struct TinyProblem {
    pub cfg: ViTConfig,
    pub params: ModelParams<f64>,
    pub images: Tensor<f64>,
    pub targets: Tensor<f64>,
    pub weights: Vec<f64>,
}

impl TinyProblem {
    pub fn new(seed: u64) -> Self {
        let cfg = tiny_config();
        let mut r = rng::substream(seed, "gradcheck", "tiny-vit");
        let mut params: ModelParams<f64> = init_params(&cfg, &mut r);
        // break the symmetric init of norms/biases so every path carries signal
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += r.random_range(-0.2..0.2);
            }
        }
        let images = Tensor::from_fn(&[2, 1, 8, 8], |_| r.random_range(0.0..1.0));
        let targets = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        Self {
            cfg,
            params,
            images,
            targets,
            weights: vec![3.0, 0.5],
        }
    }

    pub fn loss(&self, params: &ModelParams<f64>) -> f64 {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, params, false);
        let logits = forward(&mut tape, &bound, &self.cfg, &self.images).unwrap();
        let loss = weighted_bce(&mut tape, logits, &self.targets, &self.weights).unwrap();
        tape.value(loss).data()[0]
    }

    /// Max relative error per parameter name.
    pub fn check(&self) -> Vec<(String, f64)> {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &self.params, true);
        let logits = forward(&mut tape, &bound, &self.cfg, &self.images).unwrap();
        let loss = weighted_bce(&mut tape, logits, &self.targets, &self.weights).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut report = Vec::new();
        for (name, var) in bound.iter() {
            let analytic = grads.get(*var).unwrap();
            let original = self.params.get(name).unwrap();
            let numeric = finite_difference_grad(
                |w| {
                    let mut p = self.params.clone();
                    *p.get_mut(name).unwrap() = w.clone();
                    self.loss(&p)
                },
                original,
                FD_STEP,
            );
            let worst = analytic
                .data()
                .iter()
                .zip(numeric.data())
                .map(|(a, b)| relative_error(*a, *b, REL_FLOOR))
                .fold(0.0, f64::max);
            report.push((name.clone(), worst));
        }
        report
    }
}
