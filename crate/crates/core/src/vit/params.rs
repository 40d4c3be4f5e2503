use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::ViTConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `(name, shape)` entries in canonical (sorted-name) order.
pub type Manifest = Vec<(String, Vec<usize>)>;

/// Named parameter tensors. Iteration order is the sorted name order, which
/// is also the flattening and checkpoint order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

pub fn layer_param(layer: usize, suffix: &str) -> String {
    format!("blocks.{layer}.{suffix}")
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn manifest(&self) -> Manifest {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Parameters whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| keep(n))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> (Vec<T>, Manifest) {
        let mut flat = Vec::with_capacity(self.num_values());
        for t in self.tensors.values() {
            flat.extend_from_slice(t.data());
        }
        (flat, self.manifest())
    }

    pub fn unflatten(flat: &[T], manifest: &Manifest) -> Result<Self> {
        let expected: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if expected != flat.len() {
            return Err(Error::Corrupt(format!(
                "flat vector has {} values, manifest describes {expected}",
                flat.len()
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut offset = 0;
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), flat[offset..offset + n].to_vec())
                .map_err(|e| Error::Corrupt(format!("entry `{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Corrupt(format!("duplicate manifest entry `{name}`")));
            }
            offset += n;
        }
        let params = Self { tensors };
        if &params.manifest() != manifest {
            return Err(Error::Corrupt("manifest is not in canonical order".into()));
        }
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Fails unless both collections hold the same names with the same shapes.
    pub fn check_same_manifest(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Parameter(format!(
                "manifests differ: {} vs {} entries",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Parameter(format!(
                    "manifests differ at `{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Every parameter name and shape the configuration requires.
pub fn expected_manifest(cfg: &ViTConfig) -> Manifest {
    let d = cfg.embed_dim;
    let mut entries: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.weight".into(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".into(), vec![d]),
        ("cls_token".into(), vec![1, d]),
        ("pos_embed".into(), vec![cfg.seq_len(), d]),
        ("norm.gamma".into(), vec![d]),
        ("norm.beta".into(), vec![d]),
    ];
    for l in 0..cfg.num_layers {
        for norm in ["norm1", "norm2"] {
            entries.push((layer_param(l, &format!("{norm}.gamma")), vec![d]));
            entries.push((layer_param(l, &format!("{norm}.beta")), vec![d]));
        }
        for proj in ["q", "k", "v", "o"] {
            entries.push((layer_param(l, &format!("attn.{proj}.weight")), vec![d, d]));
            entries.push((layer_param(l, &format!("attn.{proj}.bias")), vec![d]));
        }
        entries.push((layer_param(l, "ffn.fc1.weight"), vec![d, cfg.ffn_dim]));
        entries.push((layer_param(l, "ffn.fc1.bias"), vec![cfg.ffn_dim]));
        entries.push((layer_param(l, "ffn.fc2.weight"), vec![cfg.ffn_dim, d]));
        entries.push((layer_param(l, "ffn.fc2.bias"), vec![d]));
    }
    let head_in = match cfg.head_hidden {
        None => d,
        Some(h) => {
            entries.push(("head.hidden.weight".into(), vec![d, h]));
            entries.push(("head.hidden.bias".into(), vec![h]));
            h
        }
    };
    entries.push(("head.weight".into(), vec![head_in, cfg.num_labels]));
    entries.push(("head.bias".into(), vec![cfg.num_labels]));
    entries.sort();
    entries
}

fn init_tensor<T: Real, R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let sample = |dist: &dyn Fn(&mut R) -> f64, rng: &mut R| {
        let data: Vec<T> = (0..numel).map(|_| T::of(dist(rng))).collect();
        Tensor::from_parts(shape.to_vec(), data)
    };
    if name.ends_with(".gamma") {
        Tensor::ones(shape)
    } else if name.ends_with(".beta") || name.ends_with(".bias") {
        Tensor::zeros(shape)
    } else if name == "cls_token" || name == "pos_embed" || name == "mask_token" {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        sample(&|r: &mut R| normal.sample(r), rng)
    } else {
        // Xavier-uniform for projection matrices
        let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let uniform = Uniform::new_inclusive(-limit, limit).expect("valid range");
        sample(&|r: &mut R| uniform.sample(r), rng)
    }
}

/// Fresh parameters for `cfg`, drawn from `rng` in canonical name order.
pub fn init_params<T: Real, R: Rng + ?Sized>(cfg: &ViTConfig, rng: &mut R) -> ModelParams<T> {
    let mut params = ModelParams::new();
    for (name, shape) in expected_manifest(cfg) {
        let t = init_tensor(&name, &shape, rng);
        params.insert(name, t);
    }
    params
}

/// Fresh tensor for a single named parameter using the same rules as [`init_params`].
pub fn init_named<T: Real, R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<T> {
    init_tensor(name, shape, rng)
}

/// Bilinearly resamples the patch rows of a positional table `[1 + g*g, d]`
/// onto a `new_grid x new_grid` grid; the classification row is kept.
pub fn resize_pos_embed<T: Real>(table: &Tensor<T>, new_grid: usize) -> Result<Tensor<T>> {
    let &[rows, d] = table.shape() else {
        return Err(Error::Parameter(format!("pos_embed must be rank 2, got {:?}", table.shape())));
    };
    let grid = ((rows - 1) as f64).sqrt().round() as usize;
    if grid * grid + 1 != rows || new_grid == 0 {
        return Err(Error::Parameter(format!(
            "pos_embed with {rows} rows is not 1 + a square grid"
        )));
    }
    if grid == new_grid {
        return Ok(table.clone());
    }
    let src = &table.data()[d..];
    let mut out = table.data()[..d].to_vec();
    let scale = grid as f64 / new_grid as f64;
    let coord = |i: usize| {
        let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(grid - 1), T::of(c - lo as f64))
    };
    for i in 0..new_grid {
        let (y0, y1, fy) = coord(i);
        for j in 0..new_grid {
            let (x0, x1, fx) = coord(j);
            let at = |y: usize, x: usize, c: usize| src[(y * grid + x) * d + c];
            for c in 0..d {
                let top = at(y0, x0, c) * (T::one() - fx) + at(y0, x1, c) * fx;
                let bottom = at(y1, x0, c) * (T::one() - fx) + at(y1, x1, c) * fx;
                out.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![1 + new_grid * new_grid, d], out))
}

/// Verifies that `params` provides exactly the tensors `cfg` requires.
pub fn check_against_config<T: Real>(params: &ModelParams<T>, cfg: &ViTConfig) -> Result<()> {
    let expected = expected_manifest(cfg);
    let actual = params.manifest();
    if expected != actual {
        let missing: Vec<_> = expected
            .iter()
            .filter(|e| !actual.contains(e))
            .map(|(n, s)| format!("{n}{s:?}"))
            .collect();
        let extra: Vec<_> = actual
            .iter()
            .filter(|e| !expected.contains(e))
            .map(|(n, s)| format!("{n}{s:?}"))
            .collect();
        return Err(Error::Parameter(format!(
            "parameters do not match config: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    Ok(())
}
