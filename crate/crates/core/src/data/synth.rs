//! Procedural radiograph analogs with exact label quotas.
//!
//! Every image shows a torso with two dark lung fields. Pneumonia adds one to
//! three bright blobs inside a lung; the "other abnormality" class adds a
//! linear opacity instead. Sites differ in size, label prevalence, anatomy
//! scale, intensity bias and noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::LabeledDataset;
use super::preprocess::preprocess_slice;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    pub intensity_bias: f64,
    pub anatomy_scale: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub site_id: String,
    pub n_train: usize,
    pub n_test: usize,
    pub prevalence_pneumonia: f64,
    pub prevalence_no_finding: f64,
    pub shift: Shift,
    /// Relative frequency of patients contributing 1, 2, 3, ... images.
    #[serde(default = "default_images_per_patient")]
    pub images_per_patient: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Side length of the rendered image before preprocessing.
    #[serde(default = "default_raw_size")]
    pub raw_size: usize,
}

fn default_images_per_patient() -> Vec<f64> {
    vec![0.6, 0.25, 0.15]
}

fn default_raw_size() -> usize {
    40
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Finding {
    NoFinding,
    Pneumonia,
    Other,
}

impl Finding {
    pub fn labels(self) -> [bool; 2] {
        match self {
            Finding::Pneumonia => [true, false],
            Finding::NoFinding => [false, true],
            Finding::Other => [false, false],
        }
    }
}

impl SiteSpec {
    /// Exact `(pneumonia, no_finding, other)` counts for `n` images.
    pub fn quota(&self, n: usize) -> Result<(usize, usize, usize)> {
        let pneumonia = (self.prevalence_pneumonia * n as f64).round() as usize;
        let no_finding = (self.prevalence_no_finding * n as f64).round() as usize;
        if pneumonia + no_finding > n {
            return Err(Error::Config(format!(
                "site `{}`: quotas {pneumonia} + {no_finding} exceed {n} images",
                self.site_id
            )));
        }
        Ok((pneumonia, no_finding, n - pneumonia - no_finding))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("site `{}`: {msg}", self.site_id)));
        if self.site_id.is_empty()
            || !self
                .site_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return fail("site id must be non-empty [A-Za-z0-9_-]".into());
        }
        if self.n_train < 10 || self.n_test < 10 {
            return fail(format!("needs at least 10 train and test images, got {}/{}", self.n_train, self.n_test));
        }
        let (p, q) = (self.prevalence_pneumonia, self.prevalence_no_finding);
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) || p + q > 1.0 + 1e-12 {
            return fail(format!("infeasible prevalences pneumonia={p}, no_finding={q}"));
        }
        self.quota(self.n_train)?;
        self.quota(self.n_test)?;
        let s = &self.shift;
        if !(s.anatomy_scale > 0.0 && s.anatomy_scale.is_finite())
            || !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite())
            || !s.intensity_bias.is_finite()
        {
            return fail(format!("invalid shift {s:?}"));
        }
        if self.images_per_patient.is_empty()
            || self.images_per_patient.iter().any(|&w| !(w >= 0.0 && w.is_finite()))
            || self.images_per_patient.iter().sum::<f64>() <= 0.0
        {
            return fail("images_per_patient needs non-negative weights with positive sum".into());
        }
        if self.raw_size < 4 {
            return fail(format!("raw size {} too small", self.raw_size));
        }
        Ok(())
    }
}

/// Five sites with the size and prevalence structure of the reference
/// cohorts, at one tenth of their training-set sizes. The first site is the
/// pediatric analog: smaller anatomy and a distinct noise level.
pub fn default_benchmark() -> Vec<SiteSpec> {
    let site = |id: &str, n_train, n_test, p, q, bias, scale, noise, seed| SiteSpec {
        site_id: id.into(),
        n_train,
        n_test,
        prevalence_pneumonia: p,
        prevalence_no_finding: q,
        shift: Shift {
            intensity_bias: bias,
            anatomy_scale: scale,
            noise_sigma: noise,
        },
        images_per_patient: default_images_per_patient(),
        seed,
        raw_size: default_raw_size(),
    };
    vec![
        site("pediatric", 773, 140, 0.12, 0.66, 0.10, 0.85, 0.09, 0),
        site("adult_a", 1500, 300, 0.04, 0.70, 0.00, 1.00, 0.05, 1),
        site("adult_b", 8652, 2560, 0.01, 0.54, -0.05, 0.96, 0.05, 2),
        site("adult_c", 8848, 2205, 0.05, 0.33, 0.03, 1.04, 0.04, 3),
        site("adult_d", 12836, 2932, 0.02, 0.11, 0.05, 1.00, 0.06, 4),
    ]
}

fn smooth_inside(r: f64) -> f64 {
    1.0 / (1.0 + (14.0 * (r - 1.0)).exp())
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn radius(&self, x: f64, y: f64) -> f64 {
        (((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)).sqrt()
    }

    fn random_point<R: Rng + ?Sized>(&self, rng: &mut R, spread: f64) -> (f64, f64) {
        let u = rng.random::<f64>().sqrt() * spread;
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        (self.cx + u * theta.cos() * self.rx, self.cy + u * theta.sin() * self.ry)
    }
}

/// Renders one raw `size x size` image.
pub fn render<R: Rng + ?Sized>(finding: Finding, shift: &Shift, size: usize, rng: &mut R) -> Vec<f32> {
    let s = shift.anatomy_scale * rng.random_range(0.93..1.07);
    let (ox, oy) = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
    let body = Ellipse { cx: ox, cy: oy + 0.05, rx: 0.85 * s, ry: s };
    let lungs = [-1.0, 1.0].map(|side| Ellipse {
        cx: ox + side * 0.36 * s,
        cy: oy - 0.02 * s,
        rx: 0.25 * s,
        ry: 0.5 * s,
    });

    enum Lesion {
        Blob { cx: f64, cy: f64, sigma: f64, amp: f64 },
        Line { px: f64, py: f64, nx: f64, ny: f64, width: f64, amp: f64 },
    }
    let lesions: Vec<Lesion> = match finding {
        Finding::NoFinding => Vec::new(),
        Finding::Pneumonia => {
            let count = rng.random_range(1..=3);
            (0..count)
                .map(|_| {
                    let lung = &lungs[rng.random_range(0..2)];
                    let (cx, cy) = lung.random_point(rng, 0.75);
                    Lesion::Blob {
                        cx,
                        cy,
                        sigma: rng.random_range(0.07..0.13) * s,
                        amp: rng.random_range(0.22..0.38),
                    }
                })
                .collect()
        }
        Finding::Other => {
            let lung = &lungs[rng.random_range(0..2)];
            let (px, py) = lung.random_point(rng, 0.5);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            vec![Lesion::Line {
                px,
                py,
                nx: -theta.sin(),
                ny: theta.cos(),
                width: rng.random_range(0.03..0.06) * s,
                amp: rng.random_range(0.2..0.35),
            }]
        }
    };

    let noise = Normal::new(0.0, shift.noise_sigma).expect("validated sigma");
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        for j in 0..size {
            let x = (j as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let inside_body = smooth_inside(body.radius(x, y));
            let mut v = 0.08 + 0.5 * inside_body;
            for lung in &lungs {
                v -= 0.33 * smooth_inside(lung.radius(x, y));
            }
            for lesion in &lesions {
                v += match *lesion {
                    Lesion::Blob { cx, cy, sigma, amp } => {
                        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                        amp * (-d2 / (2.0 * sigma * sigma)).exp()
                    }
                    Lesion::Line { px, py, nx, ny, width, amp } => {
                        let d = (x - px) * nx + (y - py) * ny;
                        amp * (-d * d / (2.0 * width * width)).exp() * inside_body
                    }
                };
            }
            v += shift.intensity_bias + noise.sample(rng);
            out.push(v as f32);
        }
    }
    out
}

fn patient_sizes<R: Rng + ?Sized>(weights: &[f64], total: usize, rng: &mut R) -> Vec<usize> {
    let dist = WeightedIndex::new(weights).expect("validated weights");
    let mut sizes = Vec::new();
    let mut covered = 0;
    while covered < total {
        let k = (dist.sample(rng) + 1).min(total - covered);
        sizes.push(k);
        covered += k;
    }
    sizes
}

fn generate_split(
    spec: &SiteSpec,
    split: &str,
    n: usize,
    first_patient: usize,
    sizes: &[usize],
    image_size: usize,
) -> Result<LabeledDataset> {
    let (np, nn, no) = spec.quota(n)?;
    let mut findings: Vec<Finding> = std::iter::repeat_n(Finding::Pneumonia, np)
        .chain(std::iter::repeat_n(Finding::NoFinding, nn))
        .chain(std::iter::repeat_n(Finding::Other, no))
        .collect();
    findings.shuffle(&mut rng::substream(spec.seed, "quota", split));

    let render_seed = rng::derive_seed(spec.seed, "render", split);
    let mut pixels = Vec::with_capacity(n * image_size * image_size);
    for (i, &finding) in findings.iter().enumerate() {
        let mut r = rng::indexed_stream(render_seed, i as u64);
        let raw = render(finding, &spec.shift, spec.raw_size, &mut r);
        pixels.extend(preprocess_slice(&raw, spec.raw_size, spec.raw_size, image_size));
    }
    let patient_ids = sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &size)| {
            std::iter::repeat_n(format!("{}-{:06}", spec.site_id, first_patient + k), size)
        })
        .collect();
    LabeledDataset::new(
        Tensor::new(vec![n, 1, image_size, image_size], pixels)?,
        findings.iter().map(|f| f.labels()).collect(),
        patient_ids,
    )
}

/// Train and test sets for one site, preprocessed to `image_size`.
/// Patient ids are disjoint between the two splits by construction.
pub fn synth_generate(spec: &SiteSpec, image_size: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    if image_size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut patients = rng::substream(spec.seed, "patients", &spec.site_id);
    let train_sizes = patient_sizes(&spec.images_per_patient, spec.n_train, &mut patients);
    let test_sizes = patient_sizes(&spec.images_per_patient, spec.n_test, &mut patients);
    let train = generate_split(spec, "train", spec.n_train, 0, &train_sizes, image_size)?;
    let test = generate_split(spec, "test", spec.n_test, train_sizes.len(), &test_sizes, image_size)?;
    Ok((train, test))
}
