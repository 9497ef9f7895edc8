//! Parametric multi-class shape corpus.
//!
//! Each volume holds one object per foreground class: ellipses, annuli and
//! rectangles (cycling with the class id) whose cross-section grows and
//! shrinks along the depth axis. Every class has its own mean intensity,
//! painted over a smooth background ramp with additive Gaussian noise.
//! Objects are painted in class order, so the label of an overlapped pixel
//! is the highest class covering it.

use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_volumes: usize,
    pub slices_per_volume: usize,
    pub resolution: usize,
    pub num_foreground_classes: usize,
    /// Standard deviation of the additive noise, in intensity units.
    pub noise: f64,
    /// Block size the resolution must tile.
    pub block_size: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_volumes: 200,
            slices_per_volume: 8,
            resolution: 32,
            num_foreground_classes: 3,
            noise: 0.5,
            block_size: 16,
        }
    }
}

const MAX_CLASSES: usize = 7;
const PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Ellipse,
    Annulus,
    Rectangle,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    z_center: f64,
    z_half: f64,
}

impl Shape {
    /// Cross-section scale at depth `z`, or `None` where the object is absent.
    fn scale_at(&self, z: usize) -> Option<f64> {
        let t = (z as f64 - self.z_center) / self.z_half;
        let s2 = 1.0 - t * t;
        (s2 > 0.16).then(|| s2.sqrt())
    }

    fn contains(&self, y: f64, x: f64, scale: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.angle.sin_cos();
        let u = (dx * cos + dy * sin) / (self.rx * scale);
        let v = (-dx * sin + dy * cos) / (self.ry * scale);
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Annulus => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
        }
    }
}

fn class_intensity(class: usize) -> f32 {
    0.6 * class as f32
}

pub fn generate_synthetic_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<Volume>> {
    if spec.num_foreground_classes < 1 || spec.num_foreground_classes > MAX_CLASSES {
        return Err(Error::invalid(format!(
            "num_foreground_classes must be in [1, {MAX_CLASSES}], got {}",
            spec.num_foreground_classes
        )));
    }
    if spec.num_volumes < 1 || spec.slices_per_volume < 1 {
        return Err(Error::invalid("corpus needs at least one volume and one slice"));
    }
    if spec.resolution < 8 {
        return Err(Error::invalid(format!("resolution {} too small", spec.resolution)));
    }
    if spec.block_size == 0 || spec.resolution % spec.block_size != 0 {
        return Err(Error::invalid(format!(
            "resolution {} is not divisible by block size {}",
            spec.resolution, spec.block_size
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid(format!("noise must be >= 0, got {}", spec.noise)));
    }
    (0..spec.num_volumes)
        .map(|v| generate_volume(spec, seed, v))
        .collect()
}

fn generate_volume(spec: &CorpusSpec, seed: u64, index: usize) -> Result<Volume> {
    let mut rng = rng::stream(seed, &[rng::tag("corpus"), index as u64]);
    let (d, n) = (spec.slices_per_volume, spec.resolution);
    let res = n as f64;

    let mut labels = Array3::<i32>::zeros((d, n, n));
    for class in 1..=spec.num_foreground_classes {
        let kind = match (class - 1) % 3 {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Annulus,
            _ => ShapeKind::Rectangle,
        };
        let z_center = (d as f64 - 1.0) / 2.0 + rng.random_range(-0.15..=0.15) * d as f64;
        let z_half = rng.random_range(0.6..=1.0) * d as f64 / 2.0 + 1.0;
        let mid = (z_center.round() as usize).min(d - 1);
        let mut chosen = None;
        for _ in 0..PLACEMENT_TRIES {
            let ry = rng.random_range(0.10..=0.20) * res;
            let rx = rng.random_range(0.10..=0.20) * res;
            let reach = ry.max(rx);
            let cand = Shape {
                kind,
                cy: rng.random_range(reach..=res - reach),
                cx: rng.random_range(reach..=res - reach),
                ry,
                rx,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                z_center,
                z_half,
            };
            // Reject placements that cover an earlier class's visible pixels
            // too heavily, or that end up nearly empty.
            let scale = cand.scale_at(mid).unwrap_or(1.0);
            let mut own = 0usize;
            let mut covered = 0usize;
            for y in 0..n {
                for x in 0..n {
                    if cand.contains(y as f64 + 0.5, x as f64 + 0.5, scale) {
                        own += 1;
                        if labels[(mid, y, x)] != 0 {
                            covered += 1;
                        }
                    }
                }
            }
            if own >= 6 && covered * 4 <= own {
                chosen = Some(cand);
                break;
            }
            chosen.get_or_insert(cand);
        }
        let shape = chosen.expect("at least one placement drawn");
        paint(&mut labels, &shape, class as i32);
    }

    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let gain: f32 = rng.random_range(0.8..=1.2);
    let offset: f32 = rng.random_range(-0.3..=0.3);
    let ramp_y: f32 = rng.random_range(-0.3..=0.3);
    let ramp_x: f32 = rng.random_range(-0.3..=0.3);
    let mut voxels = Array3::<f32>::zeros((d, n, n));
    for ((z, y, x), v) in voxels.indexed_iter_mut() {
        let base = ramp_y * (y as f32 / n as f32 - 0.5) + ramp_x * (x as f32 / n as f32 - 0.5);
        let class = labels[(z, y, x)] as usize;
        let signal = base + class_intensity(class);
        *v = gain * signal + offset + noise.sample(&mut rng) as f32;
    }
    Volume::new(format!("vol{index:04}"), voxels, Some(labels))
}

fn paint(labels: &mut Array3<i32>, shape: &Shape, class: i32) {
    let (d, n, _) = labels.dim();
    for z in 0..d {
        let Some(scale) = shape.scale_at(z) else { continue };
        for y in 0..n {
            for x in 0..n {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5, scale) {
                    labels[(z, y, x)] = class;
                }
            }
        }
    }
}
