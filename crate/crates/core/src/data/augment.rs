//! Paired-view augmentation.
//!
//! Each transform in the chain fires independently with probability
//! `apply_prob`. Transforms with zero magnitude are skipped outright, so an
//! all-zero policy reproduces its input bit for bit. Spatial transforms are
//! applied identically to the label mask.

use ndarray::{s, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PairIndex;
use crate::rng::Rng;

use super::{resize_bilinear, resize_nearest, AugmentedBatch, Slice2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    IntensityOnly,
    IntensityAndSpatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub mode: AugmentMode,
    pub apply_prob: f64,
    /// Additive brightness jitter as a fraction of the intensity range.
    pub brightness: f64,
    /// Multiplicative contrast jitter around the mean.
    pub contrast: f64,
    /// Gaussian noise std as a fraction of the intensity range.
    pub noise_std: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub flip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            mode: AugmentMode::IntensityOnly,
            apply_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            noise_std: 0.1,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
            crop_scale_min: 0.7,
            crop_scale_max: 1.0,
            flip_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// All magnitudes zero.
    pub fn identity(mode: AugmentMode) -> Self {
        Self {
            mode,
            apply_prob: 0.5,
            brightness: 0.0,
            contrast: 0.0,
            noise_std: 0.0,
            blur_sigma_min: 0.0,
            blur_sigma_max: 0.0,
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            flip_prob: 0.0,
        }
    }

    pub fn with_mode(mut self, mode: AugmentMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("augment.{name}"), format!("must be in [0, 1], got {v}")))
            }
        };
        unit("apply_prob", self.apply_prob)?;
        unit("flip_prob", self.flip_prob)?;
        unit("contrast", self.contrast)?;
        for (name, v) in [("brightness", self.brightness), ("noise_std", self.noise_std)] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("augment.{name}"), format!("must be >= 0, got {v}")));
            }
        }
        if !(0.0 <= self.blur_sigma_min && self.blur_sigma_min <= self.blur_sigma_max) {
            return Err(Error::config(
                "augment.blur_sigma_min",
                format!("need 0 <= min <= max, got [{}, {}]", self.blur_sigma_min, self.blur_sigma_max),
            ));
        }
        if !(0.0 < self.crop_scale_min && self.crop_scale_min <= self.crop_scale_max && self.crop_scale_max <= 1.0) {
            return Err(Error::config(
                "augment.crop_scale_min",
                format!("need 0 < min <= max <= 1, got [{}, {}]", self.crop_scale_min, self.crop_scale_max),
            ));
        }
        Ok(())
    }
}

/// The spatial part of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SpatialTransform {
    /// `(top, left, size)` of a square crop, resized back to full size.
    pub crop: Option<(usize, usize, usize)>,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

/// Applies a spatial transform to an image and (identically) to its mask.
pub fn apply_spatial(s: &Slice2D, t: &SpatialTransform) -> Slice2D {
    let (h, w) = s.side();
    let mut pixels = s.pixels.clone();
    let mut labels = s.labels.clone();
    if let Some((top, left, size)) = t.crop {
        let view = s.pixels.slice(s![top..top + size, left..left + size]);
        pixels = resize_bilinear(view, h, w);
        labels = s
            .labels
            .as_ref()
            .map(|l| resize_nearest(l.slice(s![top..top + size, left..left + size]), h, w));
    }
    if t.flip_horizontal {
        pixels.invert_axis(ndarray::Axis(1));
        if let Some(l) = labels.as_mut() {
            l.invert_axis(ndarray::Axis(1));
        }
    }
    if t.flip_vertical {
        pixels.invert_axis(ndarray::Axis(0));
        if let Some(l) = labels.as_mut() {
            l.invert_axis(ndarray::Axis(0));
        }
    }
    Slice2D {
        pixels: pixels.as_standard_layout().to_owned(),
        labels: labels.map(|l| l.as_standard_layout().to_owned()),
        source_volume: s.source_volume.clone(),
        slice_index: s.slice_index,
    }
}

pub fn augment_view(s: &Slice2D, policy: &AugmentPolicy, rng: &mut Rng) -> Slice2D {
    augment_view_traced(s, policy, rng).0
}

/// Like [`augment_view`], also returning the spatial transform drawn.
pub fn augment_view_traced(s: &Slice2D, policy: &AugmentPolicy, rng: &mut Rng) -> (Slice2D, SpatialTransform) {
    let mut spatial = SpatialTransform::default();
    if policy.mode == AugmentMode::IntensityAndSpatial {
        let (h, w) = s.side();
        let side = h.min(w);
        if rng.random_bool(policy.apply_prob) && policy.crop_scale_min < 1.0 {
            let scale = rng.random_range(policy.crop_scale_min..=policy.crop_scale_max);
            let size = ((scale * side as f64).round() as usize).clamp(1, side);
            if size < side || h != w {
                let top = rng.random_range(0..=h - size);
                let left = rng.random_range(0..=w - size);
                spatial.crop = Some((top, left, size));
            }
        }
        spatial.flip_horizontal = rng.random_bool(policy.flip_prob);
        spatial.flip_vertical = rng.random_bool(policy.flip_prob);
    }
    let mut out = if spatial == SpatialTransform::default() { s.clone() } else { apply_spatial(s, &spatial) };

    let (lo, hi) = out
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    let range = (hi - lo).max(1e-6) as f64;

    if rng.random_bool(policy.apply_prob) && (policy.contrast > 0.0 || policy.brightness > 0.0) {
        let c = 1.0 + if policy.contrast > 0.0 { rng.random_range(-policy.contrast..=policy.contrast) } else { 0.0 };
        let b = if policy.brightness > 0.0 {
            rng.random_range(-policy.brightness..=policy.brightness) * range
        } else {
            0.0
        };
        let mean = out.pixels.iter().map(|&p| p as f64).sum::<f64>() / out.pixels.len() as f64;
        out.pixels.mapv_inplace(|p| ((p as f64 - mean) * c + mean + b) as f32);
    }
    if rng.random_bool(policy.apply_prob) && policy.noise_std > 0.0 {
        let normal = Normal::new(0.0, policy.noise_std * range).expect("finite std");
        out.pixels.mapv_inplace(|p| p + normal.sample(rng) as f32);
    }
    if rng.random_bool(policy.apply_prob) && policy.blur_sigma_max > 0.0 {
        let sigma = rng.random_range(policy.blur_sigma_min..=policy.blur_sigma_max);
        if sigma > 0.0 {
            out.pixels = gaussian_blur(&out.pixels, sigma);
        }
    }
    (out, spatial)
}

/// Two independent draws of the augmentation chain.
pub fn augment_pair(s: &Slice2D, policy: &AugmentPolicy, rng: &mut Rng) -> (Slice2D, Slice2D) {
    let a = augment_view(s, policy, rng);
    let b = augment_view(s, policy, rng);
    (a, b)
}

/// Builds the augmented set `[x0, x0', x1, x1', ...]` from `b` slices.
pub fn make_batch(slices: &[Slice2D], policy: &AugmentPolicy, rng: &mut Rng) -> Result<AugmentedBatch> {
    if slices.is_empty() {
        return Err(Error::invalid("cannot augment an empty batch"));
    }
    let mut images = Vec::with_capacity(2 * slices.len());
    for s in slices {
        let (a, b) = augment_pair(s, policy, rng);
        images.push(a);
        images.push(b);
    }
    Ok(AugmentedBatch { images, pairing: PairIndex::adjacent(slices.len()) })
}

fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = img.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let horizontal = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wk)| wk * img[(y, reflect(x as isize + k as isize - radius, w))] as f64)
            .sum::<f64>() as f32
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wk)| wk * horizontal[(reflect(y as isize + k as isize - radius, h), x)] as f64)
            .sum::<f64>() as f32
    })
}
