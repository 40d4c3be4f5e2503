//! Random compositions of every tape primitive, checked against central
//! finite differences in double precision.

use fedssl::autodiff::{finite_difference_grad, relative_error, Tape, Var};
use fedssl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
enum Step {
    AddBias,
    MulParam,
    Sub,
    Relu,
    Sigmoid,
    ExpScaled,
    LogSigmoid,
    Clamp,
    SoftmaxRows,
    SoftmaxCols,
    LayerNorm,
    MatMul,
    MatMulNt,
    PermuteTwice,
    ReshapeTwice,
    NarrowPad,
    GatherRows,
    PrependToken,
    MaskRows,
    Affine,
}

const STEPS: [Step; 20] = [
    Step::AddBias,
    Step::MulParam,
    Step::Sub,
    Step::Relu,
    Step::Sigmoid,
    Step::ExpScaled,
    Step::LogSigmoid,
    Step::Clamp,
    Step::SoftmaxRows,
    Step::SoftmaxCols,
    Step::LayerNorm,
    Step::MatMul,
    Step::MatMulNt,
    Step::PermuteTwice,
    Step::ReshapeTwice,
    Step::NarrowPad,
    Step::GatherRows,
    Step::PrependToken,
    Step::MaskRows,
    Step::Affine,
];

/// A seeded random program over parameters of fixed shapes.
pub struct Composition {
    pub params: Vec<Tensor<f64>>,
    weights: Tensor<f64>,
    steps: Vec<Step>,
    mask: Vec<bool>,
    rows: Vec<usize>,
    use_koleo: bool,
    use_mean: bool,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

impl Composition {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(2..=4);
        let k = rng.random_range(2..=4);
        let n = rng.random_range(2..=4);
        let params = vec![
            randn(&mut rng, &[m, k], 1.0),  // 0: input
            randn(&mut rng, &[k, n], 1.0),  // 1: first projection
            randn(&mut rng, &[n], 0.5),     // 2: bias
            randn(&mut rng, &[m, n], 1.0),  // 3: elementwise factor
            randn(&mut rng, &[n], 0.5).map(|v| v + 1.0), // 4: gamma
            randn(&mut rng, &[n], 0.5),     // 5: beta
            randn(&mut rng, &[n, n], 0.7),  // 6: square projection
            randn(&mut rng, &[n], 1.0),     // 7: token
        ];
        let len = rng.random_range(3..=7);
        let mut steps: Vec<Step> = (0..len).map(|_| STEPS[rng.random_range(0..STEPS.len())]).collect();
        // every primitive appears across the suite; cycle one in deterministically too
        steps.push(STEPS[(seed as usize) % STEPS.len()]);
        let mask = (0..m).map(|i| i % 2 == (seed as usize) % 2).collect();
        let rows = (0..m + 1).map(|_| rng.random_range(0..m)).collect();
        Self {
            weights: randn(&mut rng, &[m, n], 1.0),
            params,
            steps,
            mask,
            rows,
            use_koleo: seed.is_multiple_of(3),
            use_mean: seed.is_multiple_of(2),
        }
    }

    /// Builds the program on `tape` with the given parameter leaves and returns the loss.
    pub fn build(&self, tape: &mut Tape<f64>, p: &[Var]) -> Var {
        let mut x = tape.matmul(p[0], p[1]).unwrap();
        for step in &self.steps {
            let shape = tape.shape(x).to_vec();
            let (m, n) = (shape[0], shape[1]);
            x = match step {
                Step::AddBias => tape.add(x, p[2]).unwrap(),
                Step::MulParam => tape.mul(x, p[3]).unwrap(),
                Step::Sub => tape.sub(p[3], x).unwrap(),
                Step::Relu => {
                    let shifted = tape.affine(x, 1.0, 0.05).unwrap();
                    tape.relu(shifted).unwrap()
                }
                Step::Sigmoid => tape.sigmoid(x).unwrap(),
                Step::ExpScaled => {
                    let s = tape.scale(x, 0.3).unwrap();
                    tape.exp(s).unwrap()
                }
                Step::LogSigmoid => {
                    let s = tape.sigmoid(x).unwrap();
                    tape.log(s).unwrap()
                }
                Step::Clamp => tape.clamp(x, -1.5, 1.5).unwrap(),
                Step::SoftmaxRows => tape.softmax(x, 1).unwrap(),
                Step::SoftmaxCols => tape.softmax(x, 0).unwrap(),
                Step::LayerNorm => tape.layer_norm(x, p[4], p[5], 1e-5).unwrap(),
                Step::MatMul => tape.matmul(x, p[6]).unwrap(),
                Step::MatMulNt => tape.matmul_nt(x, p[6]).unwrap(),
                Step::PermuteTwice => {
                    let t = tape.permute(x, &[1, 0]).unwrap();
                    let t = tape.sigmoid(t).unwrap();
                    tape.permute(t, &[1, 0]).unwrap()
                }
                Step::ReshapeTwice => {
                    let r = tape.reshape(x, &[n, m]).unwrap();
                    let r = tape.softmax(r, 1).unwrap();
                    tape.reshape(r, &[m, n]).unwrap()
                }
                Step::NarrowPad => {
                    // rows 1.. then re-add with broadcast of row 0 to keep the shape
                    let head = tape.narrow(x, 0, 0, 1).unwrap();
                    let head = tape.reshape(head, &[n]).unwrap();
                    tape.mul(x, head).unwrap()
                }
                Step::GatherRows => {
                    let g = tape.gather_rows(x, &self.rows).unwrap();
                    tape.narrow(g, 0, 1, m).unwrap()
                }
                Step::PrependToken => {
                    let seq = tape.reshape(x, &[1, m, n]).unwrap();
                    let with = tape.prepend_token(seq, p[7]).unwrap();
                    let tail = tape.narrow(with, 1, 0, m).unwrap();
                    tape.reshape(tail, &[m, n]).unwrap()
                }
                Step::MaskRows => tape.mask_rows(x, p[7], &self.mask).unwrap(),
                Step::Affine => tape.affine(x, -0.7, 0.2).unwrap(),
            };
        }
        let w = tape.constant(self.weights.clone());
        let weighted = tape.mul(x, w).unwrap();
        let mut loss = if self.use_mean {
            tape.mean(weighted).unwrap()
        } else {
            tape.sum(weighted).unwrap()
        };
        if self.use_koleo {
            let k = tape.koleo(x, 1e-8).unwrap();
            let k = tape.scale(k, 0.1).unwrap();
            loss = tape.add(loss, k).unwrap();
        }
        loss
    }

    fn eval_with(&self, replace: usize, value: &Tensor<f64>) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| tape.constant(if i == replace { value.clone() } else { t.clone() }))
            .collect();
        let loss = self.build(&mut tape, &vars);
        tape.value(loss).data()[0]
    }

    /// Max relative error between backward() and finite differences over all parameters.
    pub fn max_relative_error(&self) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|t| tape.param(t.clone())).collect();
        let loss = self.build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let mut worst: f64 = 0.0;
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).expect("every param has a gradient");
            let numeric = finite_difference_grad(|w| self.eval_with(i, w), &self.params[i], FD_STEP);
            for (a, b) in analytic.data().iter().zip(numeric.data()) {
                worst = worst.max(relative_error(*a, *b, REL_FLOOR));
            }
        }
        worst
    }
}
