//! Forward pass of the vision transformer on a [`Tape`].

use std::collections::BTreeMap;

use super::config::ViTConfig;
use super::params::{layer_param, ModelParams};
use crate::autodiff::{sigmoid, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Parameters registered as leaves of one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients keyed by parameter name; parameters without one are skipped.
    pub fn named_grads<T: Real>(&self, mut grads: Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(name, var)| grads.remove(*var).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Registers every parameter on `tape`; `trainable` controls gradient tracking.
pub fn bind_params<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> BoundParams {
    let vars = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable)))
        .collect();
    BoundParams { vars }
}

/// Splits `[B, C, H, W]` images into `[B, P, C*p*p]` flattened patches in
/// row-major grid order.
pub fn patchify<T: Real>(images: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let &[batch, channels, h, w] = images.shape() else {
        return Err(Error::Config(format!(
            "expected [batch, channels, height, width] images, got {:?}",
            images.shape()
        )));
    };
    if channels != cfg.channels || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Config(format!(
            "image of {channels}x{h}x{w} does not match configured {}x{s}x{s}",
            cfg.channels,
            s = cfg.image_size
        )));
    }
    if h % cfg.patch_size != 0 {
        return Err(Error::Config(format!(
            "patch_size {} does not divide image size {h}",
            cfg.patch_size
        )));
    }
    let p = cfg.patch_size;
    let grid = h / p;
    let data = images.data();
    let mut out = Vec::with_capacity(data.len());
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..channels {
                    let plane = (b * channels + c) * h * w;
                    for y in 0..p {
                        let row = plane + (gy * p + y) * w + gx * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, grid * grid, cfg.patch_dim()], out)
}

/// Token mask applied to patch embeddings before the classification token is prepended.
pub struct PatchMask<'a> {
    /// One flag per patch per image (`batch * num_patches`).
    pub flags: &'a [bool],
    pub token: Var,
}

/// Linear patch projection, optional masking, and the classification token.
/// Returns `[B, T, d]`.
pub fn patch_embed<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ViTConfig,
    images: &Tensor<T>,
    mask: Option<&PatchMask<'_>>,
) -> Result<Var> {
    let patches = tape.constant(patchify(images, cfg)?);
    let proj = tape.matmul(patches, bound.get("patch_embed.weight")?)?;
    let mut tokens = tape.add(proj, bound.get("patch_embed.bias")?)?;
    if let Some(mask) = mask {
        tokens = tape.mask_rows(tokens, mask.token, mask.flags)?;
    }
    tape.prepend_token(tokens, bound.get("cls_token")?)
}

/// Adds the learnable positional table `[T, d]` to every sequence.
pub fn add_positional<T: Real>(tape: &mut Tape<T>, seq: Var, table: Var) -> Result<Var> {
    let (s, t) = (tape.shape(seq).to_vec(), tape.shape(table).to_vec());
    if s.len() < 2 || t.len() != 2 || s[s.len() - 2..] != t[..] {
        return Err(Error::Dimension {
            op: "add_positional",
            lhs: s,
            rhs: t,
        });
    }
    tape.add(seq, table)
}

/// `softmax(Q K^T / sqrt(d_k)) V` for `[T, d]` or batched `[B, T, d]` operands.
pub fn attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    let rank = qs.len();
    let consistent = rank >= 2
        && ks.len() == rank
        && vs.len() == rank
        && qs[rank - 1] == ks[rank - 1]
        && ks[rank - 2] == vs[rank - 2]
        && qs[..rank - 2] == ks[..rank - 2]
        && ks[..rank - 2] == vs[..rank - 2];
    if !consistent {
        return Err(Error::Dimension {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let d_k = qs[rank - 1];
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, T::of(1.0 / (d_k as f64).sqrt()))?;
    let weights = tape.softmax(scaled, rank - 1)?;
    tape.matmul(weights, v)
}

/// `x @ {prefix}.weight + {prefix}.bias`.
pub fn linear<T: Real>(tape: &mut Tape<T>, bound: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, bound.get(&format!("{prefix}.weight"))?)?;
    tape.add(y, bound.get(&format!("{prefix}.bias"))?)
}

fn norm<T: Real>(tape: &mut Tape<T>, bound: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
    let g = bound.get(&format!("{prefix}.gamma"))?;
    let b = bound.get(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, T::of(LN_EPS))
}

/// Multi-head self-attention over `x: [B, T, d]` with projection prefix `attn`.
fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ViTConfig,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let (h, dk) = (cfg.num_heads, cfg.head_dim());
    let heads = |name: &str, tape: &mut Tape<T>| -> Result<Var> {
        let p = linear(tape, bound, x, &format!("{prefix}.{name}"))?;
        let p = tape.reshape(p, &[b, t, h, dk])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        tape.reshape(p, &[b * h, t, dk])
    };
    let q = heads("q", tape)?;
    let k = heads("k", tape)?;
    let v = heads("v", tape)?;
    let ctx = attention(tape, q, k, v)?;
    let ctx = tape.reshape(ctx, &[b, h, t, dk])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, d])?;
    linear(tape, bound, ctx, &format!("{prefix}.o"))
}

/// Pre-norm residual block: `x + MHSA(LN(x))`, then `+ FFN(LN(.))` with a ReLU hidden layer.
pub fn encoder_layer<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ViTConfig,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let n1 = norm(tape, bound, x, &layer_param(layer, "norm1"))?;
    let attn = self_attention(tape, bound, cfg, n1, &layer_param(layer, "attn"))?;
    let x = tape.add(x, attn)?;
    let n2 = norm(tape, bound, x, &layer_param(layer, "norm2"))?;
    let hidden = linear(tape, bound, n2, &layer_param(layer, "ffn.fc1"))?;
    let hidden = tape.relu(hidden)?;
    let ffn = linear(tape, bound, hidden, &layer_param(layer, "ffn.fc2"))?;
    tape.add(x, ffn)
}

/// Full encoder: embedding, positions, blocks, and the final norm. Returns `[B, T, d]`.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ViTConfig,
    images: &Tensor<T>,
    mask: Option<&PatchMask<'_>>,
) -> Result<Var> {
    let pos = bound.get("pos_embed")?;
    if tape.shape(pos) != [cfg.seq_len(), cfg.embed_dim] {
        return Err(Error::Parameter(format!(
            "pos_embed has shape {:?}, config needs [{}, {}]",
            tape.shape(pos),
            cfg.seq_len(),
            cfg.embed_dim
        )));
    }
    let seq = patch_embed(tape, bound, cfg, images, mask)?;
    let mut x = add_positional(tape, seq, pos)?;
    for layer in 0..cfg.num_layers {
        x = encoder_layer(tape, bound, cfg, layer, x)?;
    }
    norm(tape, bound, x, "norm")
}

/// Classification-token representation `[B, d]` of encoded tokens.
pub fn cls_features<T: Real>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let cls = tape.narrow(tokens, 1, 0, 1)?;
    tape.reshape(cls, &[shape[0], shape[2]])
}

/// Patch tokens (classification token dropped) flattened to `[B * P, d]`.
pub fn patch_features<T: Real>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let patches = tape.narrow(tokens, 1, 1, shape[1] - 1)?;
    tape.reshape(patches, &[shape[0] * (shape[1] - 1), shape[2]])
}

/// Logits `[B, num_labels]`; probabilities are their sigmoids.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ViTConfig,
    images: &Tensor<T>,
) -> Result<Var> {
    let tokens = encode(tape, bound, cfg, images, None)?;
    let mut feat = cls_features(tape, tokens)?;
    if cfg.head_hidden.is_some() {
        feat = linear(tape, bound, feat, "head.hidden")?;
        feat = tape.relu(feat)?;
    }
    let logits = linear(tape, bound, feat, "head")?;
    if tape.shape(logits)[1] != cfg.num_labels {
        return Err(Error::Parameter(format!(
            "head produces {} logits, config expects {}",
            tape.shape(logits)[1],
            cfg.num_labels
        )));
    }
    Ok(logits)
}

/// Sigmoid probabilities `[n, num_labels]` for `[n, C, H, W]` images, in chunks.
pub fn predict_proba<T: Real>(
    params: &ModelParams<T>,
    cfg: &ViTConfig,
    images: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    let shape = images.shape().to_vec();
    let per_image: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(shape[0] * cfg.num_labels);
    for block in images.data().chunks(per_image * chunk.max(1)) {
        let n = block.len() / per_image;
        let mut batch_shape = shape.clone();
        batch_shape[0] = n;
        let batch = Tensor::new(batch_shape, block.to_vec())?;
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, params, false);
        let logits = forward(&mut tape, &bound, cfg, &batch)?;
        out.extend(tape.value(logits).data().iter().map(|&z| sigmoid(z)));
    }
    Tensor::new(vec![shape[0], cfg.num_labels], out)
}
