mod support;

use fedssl::autodiff::Tape;
use fedssl::rng;
use fedssl::vit::model::{attention, bind_params, encoder_layer};
use fedssl::vit::params::layer_param;
use fedssl::vit::{init_params, ModelParams, ViTConfig};
use fedssl::Tensor;
use proptest::prelude::*;
use support::vit_gradcheck::TinyProblem;

#[test]
fn full_model_gradient_matches_finite_differences() {
    let problem = TinyProblem::new(11);
    let report = problem.check();
    assert_eq!(report.len(), problem.params.len());
    for (name, err) in report {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

// Scalar re-evaluation of one pre-norm block, written without the tape.
fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
}

fn affine_row(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|c| b.data()[c] + (0..rows).map(|r| x[r] * w.data()[r * cols + c]).sum::<f64>())
        .collect()
}

fn oracle_block(x: &[Vec<f64>], p: &ModelParams<f64>) -> Vec<Vec<f64>> {
    let get = |n: &str| p.get(&layer_param(0, n)).unwrap();
    let t = x.len();
    let n1: Vec<_> = x.iter().map(|r| layer_norm_row(r, get("norm1.gamma").data(), get("norm1.beta").data())).collect();
    let q: Vec<_> = n1.iter().map(|r| affine_row(r, get("attn.q.weight"), get("attn.q.bias"))).collect();
    let k: Vec<_> = n1.iter().map(|r| affine_row(r, get("attn.k.weight"), get("attn.k.bias"))).collect();
    let v: Vec<_> = n1.iter().map(|r| affine_row(r, get("attn.v.weight"), get("attn.v.bias"))).collect();
    let d = q[0].len();
    let mut ctx = vec![vec![0.0; d]; t];
    for i in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..t {
            let a = scores[j].exp() / z;
            for c in 0..d {
                ctx[i][c] += a * v[j][c];
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..t {
        let o = affine_row(&ctx[i], get("attn.o.weight"), get("attn.o.bias"));
        let h: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
        let n2 = layer_norm_row(&h, get("norm2.gamma").data(), get("norm2.beta").data());
        let hidden: Vec<f64> = affine_row(&n2, get("ffn.fc1.weight"), get("ffn.fc1.bias"))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let f = affine_row(&hidden, get("ffn.fc2.weight"), get("ffn.fc2.bias"));
        out.push(h.iter().zip(&f).map(|(a, b)| a + b).collect());
    }
    out
}

#[test]
fn encoder_layer_matches_scalar_oracle() {
    let cfg = ViTConfig {
        image_size: 1,
        patch_size: 1,
        embed_dim: 4,
        num_layers: 1,
        num_heads: 1,
        ffn_dim: 6,
        ..ViTConfig::default()
    };
    let mut r = rng::substream(5, "oracle", "block");
    let mut params: ModelParams<f64> = init_params(&cfg, &mut r);
    for (i, (_, t)) in params.iter_mut().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v += ((i * 31 + j * 7) % 13) as f64 / 40.0 - 0.15;
        }
    }
    let x_rows = vec![vec![0.3, -1.2, 0.8, 0.1], vec![-0.5, 0.4, 1.5, -0.9]];
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, false);
    let x = tape.constant(Tensor::new(vec![1, 2, 4], x_rows.concat()).unwrap());
    let y = encoder_layer(&mut tape, &bound, &cfg, 0, x).unwrap();
    let expected = oracle_block(&x_rows, &params).concat();
    for (a, b) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn attention_weights(q: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let scores = tape.matmul_nt(qv, kv).unwrap();
    let scaled = tape.scale(scores, 1.0 / (q.shape()[1] as f64).sqrt()).unwrap();
    let w = tape.softmax(scaled, 1).unwrap();
    tape.value(w).clone()
}

proptest! {
    #[test]
    fn attention_invariant_to_joint_key_value_permutation(
        t in 2usize..6, dk in 1usize..4, dv in 1usize..4, seed in any::<u64>(), shift in 1usize..5,
    ) {
        let gen = |shape: &[usize], salt: u64| Tensor::<f64>::from_fn(shape, |i| {
            let h = (i as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15) ^ seed ^ salt;
            (h % 2000) as f64 / 500.0 - 2.0
        });
        let (q, k, v) = (gen(&[t, dk], 1), gen(&[t, dk], 2), gen(&[t, dv], 3));
        let perm: Vec<usize> = (0..t).map(|i| (i + shift) % t).collect();
        let permute = |m: &Tensor<f64>| {
            let c = m.shape()[1];
            let data: Vec<f64> = perm.iter().flat_map(|&r| m.data()[r * c..(r + 1) * c].to_vec()).collect();
            Tensor::new(m.shape().to_vec(), data).unwrap()
        };
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let (kp, vp) = (tape.constant(permute(&k)), tape.constant(permute(&v)));
        let a = attention(&mut tape, qv, kv, vv).unwrap();
        let b = attention(&mut tape, qv, kp, vp).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let w = attention_weights(&q, &k);
        for row in w.data().chunks(t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // each output row is a convex combination of value rows
        for (r, row) in tape.value(a).data().chunks(dv).enumerate() {
            for (c, &x) in row.iter().enumerate() {
                let col: Vec<f64> = (0..t).map(|j| v.data()[j * dv + c]).collect();
                let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12, "row {r}");
            }
        }
    }
}
