//! Teacher-student distillation loop.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use super::config::SSLConfig;
use super::objectives::{teacher_probs, PROB_CLAMP};
use super::views::{make_views, mask_patches};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};
use crate::vit::model::{bind_params, cls_features, encode, linear, patch_features, BoundParams, PatchMask};
use crate::vit::params::{expected_manifest, init_named, is_head_param, resize_pos_embed, Manifest};
use crate::vit::{adamw_step, AdamState, ModelParams, TrainConfig, ViTConfig};

pub const HEAD_PREFIX: &str = "ssl_head.";
pub const MASK_TOKEN: &str = "mask_token";

/// Encoder parameters shared with the classifier (no heads, no mask token).
pub fn is_backbone_param(name: &str) -> bool {
    !is_head_param(name) && !name.starts_with(HEAD_PREFIX) && name != MASK_TOKEN
}

/// Student (and teacher) manifest: backbone, projection head, mask token.
pub fn ssl_manifest(vit: &ViTConfig, ssl: &SSLConfig) -> Manifest {
    let d = vit.embed_dim;
    let mut m: Manifest = expected_manifest(vit)
        .into_iter()
        .filter(|(n, _)| is_backbone_param(n))
        .collect();
    m.push((format!("{HEAD_PREFIX}fc1.weight"), vec![d, ssl.head_hidden]));
    m.push((format!("{HEAD_PREFIX}fc1.bias"), vec![ssl.head_hidden]));
    m.push((format!("{HEAD_PREFIX}fc2.weight"), vec![ssl.head_hidden, ssl.head_hidden]));
    m.push((format!("{HEAD_PREFIX}fc2.bias"), vec![ssl.head_hidden]));
    m.push((format!("{HEAD_PREFIX}prototypes"), vec![ssl.prototype_dim, ssl.head_hidden]));
    m.push((MASK_TOKEN.to_string(), vec![1, d]));
    m.sort();
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudent<T = f32> {
    pub student: ModelParams<T>,
    pub teacher: ModelParams<T>,
    pub iteration: usize,
}

impl<T: Real> TeacherStudent<T> {
    /// Fresh student; the teacher starts as an exact copy.
    pub fn init<R: Rng + ?Sized>(vit: &ViTConfig, ssl: &SSLConfig, rng: &mut R) -> Self {
        let mut student = ModelParams::new();
        for (name, shape) in ssl_manifest(vit, ssl) {
            let t = init_named(&name, &shape, rng);
            student.insert(name, t);
        }
        Self {
            teacher: student.clone(),
            student,
            iteration: 0,
        }
    }

    pub fn backbone(&self) -> ModelParams<T> {
        self.student.filtered(is_backbone_param)
    }

    fn resize_positions(&mut self, grid: usize) -> Result<()> {
        for params in [&mut self.student, &mut self.teacher] {
            let table = params.get("pos_embed")?;
            let resized = resize_pos_embed(table, grid)?;
            params.insert("pos_embed", resized);
        }
        Ok(())
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, coordinate-wise, computed in
/// double precision.
pub fn ema_update<T: Real>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, m: f64) -> Result<()> {
    teacher.check_same_manifest(student)?;
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA momentum {m} outside [0, 1]")));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = T::of(m * tv.as_f64() + (1.0 - m) * sv.as_f64());
        }
    }
    Ok(())
}

const STANDARDIZE_EPS: f64 = 1e-6;

/// Projection head: a two-layer MLP to a bottleneck, then the cosine
/// similarity of the standardized bottleneck with each standardized
/// prototype, so scores lie in `[-1, 1]`.
fn project<T: Real>(tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
    let h = linear(tape, bound, x, &format!("{HEAD_PREFIX}fc1"))?;
    let h = tape.relu(h)?;
    let z = linear(tape, bound, h, &format!("{HEAD_PREFIX}fc2"))?;
    let width = tape.shape(z)[1];
    let ones = tape.constant(Tensor::ones(&[width]));
    let zeros = tape.constant(Tensor::zeros(&[width]));
    let eps = T::of(STANDARDIZE_EPS);
    let z = tape.layer_norm(z, ones, zeros, eps)?;
    let protos = bound.get(&format!("{HEAD_PREFIX}prototypes"))?;
    let protos = tape.layer_norm(protos, ones, zeros, eps)?;
    let scores = tape.matmul_nt(z, protos)?;
    tape.scale(scores, T::of(1.0 / width as f64))
}

/// Teacher distributions: image level from `x_t`, patch level from the
/// unmasked `x_s` at the rows the student sees masked.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets<T = f32> {
    pub image: Tensor<T>,
    pub patch: Tensor<T>,
}

pub fn teacher_targets<T: Real>(
    teacher: &ModelParams<T>,
    vit: &ViTConfig,
    ssl: &SSLConfig,
    x_t: &Tensor<T>,
    x_s: &Tensor<T>,
    masked_rows: &[usize],
) -> Result<TeacherTargets<T>> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, teacher, false);
    let tokens = encode(&mut tape, &bound, vit, x_t, None)?;
    let cls = cls_features(&mut tape, tokens)?;
    let scores = project(&mut tape, &bound, cls)?;
    let image = teacher_probs(tape.value(scores), ssl.teacher_temperature, ssl.sinkhorn_iters)?;

    let tokens = encode(&mut tape, &bound, vit, x_s, None)?;
    let patches = patch_features(&mut tape, tokens)?;
    let picked = tape.gather_rows(patches, masked_rows)?;
    let scores = project(&mut tape, &bound, picked)?;
    let patch = teacher_probs(tape.value(scores), ssl.teacher_temperature, ssl.sinkhorn_iters)?;
    Ok(TeacherTargets { image, patch })
}

/// Loss terms recorded on the student's tape.
#[derive(Debug, Clone, Copy)]
pub struct StudentLoss {
    pub total: Var,
    pub image: Var,
    pub patch: Var,
    pub koleo: Var,
}

/// `-(1/N) sum_n sum_k target * log clamp(softmax(scores / temperature))`.
fn tracked_cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    scores: Var,
    target: &Tensor<T>,
    temperature: f64,
) -> Result<Var> {
    let rows = tape.shape(scores)[0];
    let z = tape.scale(scores, T::of(1.0 / temperature))?;
    let p = tape.softmax(z, 1)?;
    let p = tape.clamp(p, T::of(PROB_CLAMP), T::one())?;
    let log_p = tape.log(p)?;
    let t = tape.constant(target.clone());
    let weighted = tape.mul(log_p, t)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, T::of(-1.0 / rows as f64))
}

/// Student objective `alpha * L_image + beta * L_patch + koleo_weight * L_koleo`
/// on the masked student view.
#[allow(clippy::too_many_arguments)]
pub fn student_loss<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    vit: &ViTConfig,
    ssl: &SSLConfig,
    x_s: &Tensor<T>,
    mask_flags: &[bool],
    masked_rows: &[usize],
    targets: &TeacherTargets<T>,
) -> Result<StudentLoss> {
    let mask = PatchMask {
        flags: mask_flags,
        token: bound.get(MASK_TOKEN)?,
    };
    let tokens = encode(tape, bound, vit, x_s, Some(&mask))?;
    let cls = cls_features(tape, tokens)?;
    let scores = project(tape, bound, cls)?;
    let image = tracked_cross_entropy(tape, scores, &targets.image, ssl.student_temperature)?;

    let patches = patch_features(tape, tokens)?;
    let picked = tape.gather_rows(patches, masked_rows)?;
    let scores = project(tape, bound, picked)?;
    let patch = tracked_cross_entropy(tape, scores, &targets.patch, ssl.student_temperature)?;

    let koleo = tape.koleo(cls, T::of(ssl.koleo_epsilon))?;

    let a = tape.scale(image, T::of(ssl.alpha))?;
    let b = tape.scale(patch, T::of(ssl.beta))?;
    let k = tape.scale(koleo, T::of(ssl.koleo_weight))?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, k)?;
    Ok(StudentLoss {
        total,
        image,
        patch,
        koleo,
    })
}

/// One line of the pretraining log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainRecord {
    pub iteration: usize,
    #[serde(rename = "L_image")]
    pub l_image: f64,
    #[serde(rename = "L_patch")]
    pub l_patch: f64,
    pub koleo: f64,
    pub total: f64,
    pub resolution: usize,
}

/// One masked batch: images `[B, 1, r, r]` for both views plus mask layout.
struct Batch {
    x_s: Tensor<f32>,
    x_t: Tensor<f32>,
    flags: Vec<bool>,
    rows: Vec<usize>,
}

fn build_batch(
    pool: &Tensor<f32>,
    picks: &[usize],
    resolution: usize,
    vit: &ViTConfig,
    ssl: &SSLConfig,
    view_seed: u64,
    first_item: u64,
) -> Result<Batch> {
    let size = pool.shape()[2];
    let per = size * size;
    let num_patches = vit.num_patches();
    let mut xs = Vec::with_capacity(picks.len() * resolution * resolution);
    let mut xt = Vec::with_capacity(xs.capacity());
    let mut flags = vec![false; picks.len() * num_patches];
    let mut rows = Vec::new();
    for (b, &i) in picks.iter().enumerate() {
        let mut r = rng::indexed_stream(view_seed, first_item + b as u64);
        let image = &pool.data()[i * per..(i + 1) * per];
        let (s, t) = make_views(image, size, resolution, ssl, &mut r);
        xs.extend(s);
        xt.extend(t);
        for j in mask_patches(num_patches, ssl.mask_ratio, &mut r)? {
            flags[b * num_patches + j] = true;
            rows.push(b * num_patches + j);
        }
    }
    let shape = vec![picks.len(), 1, resolution, resolution];
    Ok(Batch {
        x_s: Tensor::new(shape.clone(), xs)?,
        x_t: Tensor::new(shape, xt)?,
        flags,
        rows,
    })
}

/// Runs `ssl.iterations` distillation steps over the unlabeled `pool`
/// (`[n, 1, H, W]`) and returns the student backbone, whose positional table
/// matches the last scheduled resolution.
pub fn pretrain(
    pool: &Tensor<f32>,
    vit: &ViTConfig,
    ssl: &SSLConfig,
    seed: u64,
    mut on_record: impl FnMut(&PretrainRecord) -> Result<()>,
) -> Result<ModelParams<f32>> {
    vit.validate()?;
    ssl.validate()?;
    let &[n, 1, h, w] = pool.shape() else {
        return Err(Error::Config(format!("pretraining pool must be [n,1,H,W], got {:?}", pool.shape())));
    };
    if h != w {
        return Err(Error::Config(format!("pretraining images must be square, got {h}x{w}")));
    }
    let mut resolution = ssl.resolution_at(0, vit.image_size);
    let mut cfg = vit.with_image_size(resolution);
    cfg.validate()?;
    let mut state: TeacherStudent<f32> = TeacherStudent::init(&cfg, ssl, &mut rng::substream(seed, "ssl-init", ""));
    let mut optim = AdamState::new();
    let opt_cfg = TrainConfig {
        learning_rate: ssl.learning_rate,
        weight_decay: ssl.weight_decay,
        ..TrainConfig::default()
    };
    let mut batches = rng::substream(seed, "ssl-batch", "");
    let view_seed = rng::derive_seed(seed, "ssl-views", "");
    let batch_size = ssl.batch_size.min(n);
    if batch_size < 2 {
        return Err(Error::Config("pretraining pool needs at least 2 images".into()));
    }

    for it in 0..ssl.iterations {
        let next = ssl.resolution_at(it, vit.image_size);
        if next != resolution {
            resolution = next;
            cfg = vit.with_image_size(resolution);
            cfg.validate()?;
            state.resize_positions(cfg.grid())?;
            optim.reset();
        }
        let picks = index::sample(&mut batches, n, batch_size).into_vec();
        let batch = build_batch(pool, &picks, resolution, &cfg, ssl, view_seed, (it * batch_size) as u64)?;
        let targets = teacher_targets(&state.teacher, &cfg, ssl, &batch.x_t, &batch.x_s, &batch.rows)?;

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &state.student, true);
        let loss = student_loss(&mut tape, &bound, &cfg, ssl, &batch.x_s, &batch.flags, &batch.rows, &targets)?;
        let value = |v: Var| tape.value(v).data()[0] as f64;
        let record = PretrainRecord {
            iteration: it,
            l_image: value(loss.image),
            l_patch: value(loss.patch),
            koleo: value(loss.koleo),
            total: value(loss.total),
            resolution,
        };
        if !record.total.is_finite() {
            return Err(Error::Divergence {
                what: "pretraining loss".into(),
                step: it,
            });
        }
        let grads: BTreeMap<String, Tensor<f32>> = bound.named_grads(tape.backward(loss.total)?);
        adamw_step(&mut state.student, &grads, &mut optim, &opt_cfg).map_err(|e| match e {
            Error::Divergence { what, .. } => Error::Divergence { what, step: it },
            other => other,
        })?;
        ema_update(&mut state.teacher, &state.student, ssl.ema_momentum)?;
        state.iteration = it + 1;
        on_record(&record)?;
    }
    Ok(state.backbone())
}
