//! Resize, min-max scaling, histogram equalization, and training-time
//! augmentation of single-channel images stored row-major.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EQUALIZE_LEVELS: usize = 256;
pub const MAX_ROTATION_DEG: f64 = 10.0;

/// Bilinear sample at fractional `(y, x)` with edge clamping.
fn sample(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y = (i as f64 + 0.5) * sy - 0.5;
        for j in 0..out_w {
            let x = (j as f64 + 0.5) * sx - 0.5;
            out.push(sample(src, h, w, y, x));
        }
    }
    out
}

/// Affine map onto `[0, 1]`; a constant image maps to all zeros.
pub fn min_max_scale(img: &mut [f32]) {
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if range > 0.0 && range.is_finite() {
        for v in img.iter_mut() {
            *v = ((*v - lo) / range).clamp(0.0, 1.0);
        }
    } else {
        img.fill(0.0);
    }
}

/// Global 256-level histogram equalization of an image in `[0, 1]`:
/// `h(v) = round((cdf(v) - cdf_min) / (P - cdf_min) * 255) / 255`.
pub fn equalize(img: &mut [f32]) {
    let top = (EQUALIZE_LEVELS - 1) as f32;
    let level = |v: f32| (v.clamp(0.0, 1.0) * top).round() as usize;
    let mut hist = [0usize; EQUALIZE_LEVELS];
    for &v in img.iter() {
        hist[level(v)] += 1;
    }
    let mut cdf = [0usize; EQUALIZE_LEVELS];
    let mut running = 0;
    for (c, &n) in cdf.iter_mut().zip(&hist) {
        running += n;
        *c = running;
    }
    let total = img.len();
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if total == cdf_min {
        // single occupied level
        img.fill(0.0);
        return;
    }
    let denom = (total - cdf_min) as f64;
    let map: Vec<f32> = cdf
        .iter()
        .map(|&c| {
            let scaled = (c.saturating_sub(cdf_min) as f64 / denom * top as f64).round();
            (scaled / top as f64) as f32
        })
        .collect();
    for v in img.iter_mut() {
        *v = map[level(*v)];
    }
}

/// Resize to `size x size`, min-max scale, then equalize.
///
/// Accepts `[H, W]` or `[1, H, W]` input and returns `[1, size, size]`.
pub fn preprocess(raw: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (h, w) = match raw.shape() {
        &[h, w] | &[1, h, w] => (h, w),
        other => {
            return Err(Error::Dimension {
                op: "preprocess",
                lhs: other.to_vec(),
                rhs: vec![1, size, size],
            })
        }
    };
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    Ok(Tensor::from_parts(vec![1, size, size], preprocess_slice(raw.data(), h, w, size)))
}

pub(crate) fn preprocess_slice(raw: &[f32], h: usize, w: usize, size: usize) -> Vec<f32> {
    let mut img = resize_bilinear(raw, h, w, size, size);
    min_max_scale(&mut img);
    equalize(&mut img);
    img
}

/// Rotation by `angle_deg` about the image center (bilinear, edge padded),
/// followed by an optional horizontal flip.
pub fn augment_with(img: &[f32], h: usize, w: usize, angle_deg: f64, flip: bool) -> Vec<f32> {
    let mut out = if angle_deg == 0.0 {
        img.to_vec()
    } else {
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            let dy = i as f64 - cy;
            for j in 0..w {
                let dx = j as f64 - cx;
                // inverse rotation: where did this output pixel come from
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                out.push(sample(img, h, w, sy, sx));
            }
        }
        out
    };
    if flip {
        for row in out.chunks_mut(w) {
            row.reverse();
        }
    }
    out
}

/// Angle drawn from `U(-10, 10)` degrees, flip with probability 0.5.
pub fn sample_augmentation<R: Rng + ?Sized>(rng: &mut R) -> (f64, bool) {
    let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    (angle, rng.random_bool(0.5))
}

pub fn augment<R: Rng + ?Sized>(img: &[f32], h: usize, w: usize, rng: &mut R) -> Vec<f32> {
    let (angle, flip) = sample_augmentation(rng);
    augment_with(img, h, w, angle, flip)
}
