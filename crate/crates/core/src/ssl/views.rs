use rand::seq::index;
use rand::Rng;

use super::config::SSLConfig;
use crate::data::preprocess::{augment_with, resize_bilinear, sample_augmentation};
use crate::error::{Error, Result};

/// Random parameters of one augmented view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    /// Crop side as a fraction of the image side.
    pub crop: f64,
    /// Crop origin as fractions of the free margin.
    pub origin: (f64, f64),
    pub angle_deg: f64,
    pub flip: bool,
}

pub fn sample_view<R: Rng + ?Sized>(cfg: &SSLConfig, rng: &mut R) -> ViewParams {
    let crop = rng.random_range(cfg.crop_min_scale..=1.0);
    let origin = (rng.random::<f64>(), rng.random::<f64>());
    let (angle_deg, flip) = sample_augmentation(rng);
    ViewParams {
        crop,
        origin,
        angle_deg,
        flip,
    }
}

/// Crops a square of `image` (`size x size`), resizes it to `out x out`,
/// then rotates and flips.
pub fn apply_view(image: &[f32], size: usize, out: usize, view: &ViewParams) -> Vec<f32> {
    let side = ((view.crop * size as f64).round() as usize).clamp(2.min(size), size);
    let margin = size - side;
    let oy = (view.origin.0 * margin as f64).round() as usize;
    let ox = (view.origin.1 * margin as f64).round() as usize;
    let mut crop = Vec::with_capacity(side * side);
    for y in oy..oy + side {
        crop.extend_from_slice(&image[y * size + ox..y * size + ox + side]);
    }
    let resized = resize_bilinear(&crop, side, side, out, out);
    augment_with(&resized, out, out, view.angle_deg, view.flip)
}

/// Two independently augmented views `(x_s, x_t)` of one image, each
/// `out x out`. Without augmentation both are the image resized to `out`.
pub fn make_views<R: Rng + ?Sized>(
    image: &[f32],
    size: usize,
    out: usize,
    cfg: &SSLConfig,
    rng: &mut R,
) -> (Vec<f32>, Vec<f32>) {
    if !cfg.augment {
        let plain = resize_bilinear(image, size, size, out, out);
        return (plain.clone(), plain);
    }
    let student = sample_view(cfg, rng);
    let teacher = sample_view(cfg, rng);
    (apply_view(image, size, out, &student), apply_view(image, size, out, &teacher))
}

/// Number of patches masked at `ratio`.
pub fn mask_count(num_patches: usize, ratio: f64) -> usize {
    ((ratio * num_patches as f64).ceil() as usize).min(num_patches)
}

/// Exactly `ceil(ratio * num_patches)` distinct patch indices, ascending.
/// Indices count patches only; the classification token is never a candidate.
pub fn mask_patches<R: Rng + ?Sized>(num_patches: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let mut picked = index::sample(rng, num_patches, mask_count(num_patches, ratio)).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn disabled_augmentation_is_identity() {
        let img: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let cfg = SSLConfig {
            augment: false,
            ..SSLConfig::default()
        };
        let (s, t) = make_views(&img, 4, 4, &cfg, &mut rng::substream(0, "v", ""));
        assert_eq!(s, img);
        assert_eq!(t, img);
    }

    #[test]
    fn views_are_seed_deterministic() {
        let img: Vec<f32> = (0..64).map(|i| (i % 7) as f32).collect();
        let cfg = SSLConfig::default();
        let a = make_views(&img, 8, 8, &cfg, &mut rng::substream(4, "v", ""));
        let b = make_views(&img, 8, 8, &cfg, &mut rng::substream(4, "v", ""));
        assert_eq!(a, b);
    }

    #[test]
    fn mask_counts() {
        let m = mask_patches(4, 0.5, &mut rng::substream(1, "m", "")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(mask_patches(16, 0.3, &mut rng::substream(1, "m", "")).unwrap().len(), 5);
        assert_eq!(
            mask_patches(16, 0.3, &mut rng::substream(9, "m", "")).unwrap(),
            mask_patches(16, 0.3, &mut rng::substream(9, "m", "")).unwrap()
        );
        assert!(mask_patches(4, 1.0, &mut rng::substream(1, "m", "")).is_err());
    }
}
