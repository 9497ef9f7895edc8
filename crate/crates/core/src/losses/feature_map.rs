use crate::error::{Error, Result};

use super::UNIT_NORM_TOL;

const NORM_EPS: f64 = 1e-12;

/// L2-normalizes `raw`, returning the unit vector and the original norm.
pub fn normalize(raw: &[f64]) -> (Vec<f64>, f64) {
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    (raw.iter().map(|x| x / norm).collect(), norm)
}

/// Pulls a gradient with respect to a unit vector back to the raw vector it
/// was normalized from: `(g - u (u . g)) / |x|`. A zero input has no
/// direction and receives a zero gradient.
pub fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    if norm <= NORM_EPS {
        return vec![0.0; unit.len()];
    }
    let proj: f64 = unit.iter().zip(grad_unit).map(|(u, g)| u * g).sum();
    unit.iter()
        .zip(grad_unit)
        .map(|(u, g)| (g - u * proj) / norm)
        .collect()
}

/// A per-pixel embedding map `c x H x W` together with its optional label
/// mask. Features are stored pixel-major so each pixel's vector is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    features: Vec<f64>,
    norms: Vec<f64>,
    /// Whether `features` are normalized copies of the raw input, which
    /// decides how [`Self::backprop`] maps gradients back.
    normalized: bool,
    labels: Option<Vec<i32>>,
    pub image_index: usize,
}

impl LocalFeatureMap {
    /// Builds a map from already unit-normalized pixel-major features.
    pub fn from_unit(
        channels: usize,
        height: usize,
        width: usize,
        features: Vec<f64>,
        labels: Option<Vec<i32>>,
        image_index: usize,
    ) -> Result<Self> {
        check_dims(channels, height, width, features.len(), labels.as_deref())?;
        for (p, f) in features.chunks_exact(channels).enumerate() {
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!("pixel {p} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            norms: vec![1.0; height * width],
            normalized: true,
            features,
            labels,
            image_index,
        })
    }

    /// Builds a map from a raw channel-major `c x H x W` buffer, as produced
    /// by a convolutional head. With `normalize` set, each pixel vector is
    /// scaled to unit length and the norms are kept for [`Self::backprop`].
    pub fn from_raw_channel_major<T: Copy + Into<f64>>(
        raw: &[T],
        channels: usize,
        height: usize,
        width: usize,
        labels: Option<Vec<i32>>,
        image_index: usize,
        normalize_pixels: bool,
    ) -> Result<Self> {
        check_dims(channels, height, width, raw.len(), labels.as_deref())?;
        let hw = height * width;
        let mut features = vec![0.0; raw.len()];
        let mut norms = vec![1.0; hw];
        for p in 0..hw {
            let px = &mut features[p * channels..(p + 1) * channels];
            for (ch, slot) in px.iter_mut().enumerate() {
                *slot = raw[ch * hw + p].into();
            }
            if normalize_pixels {
                let (unit, n) = normalize(px);
                px.copy_from_slice(&unit);
                norms[p] = n;
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            features,
            norms,
            normalized: normalize_pixels,
            labels,
            image_index,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn label(&self, row: usize, col: usize) -> Option<i32> {
        self.labels.as_ref().map(|l| l[row * self.width + col])
    }

    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        let p = row * self.width + col;
        &self.features[p * self.channels..(p + 1) * self.channels]
    }

    /// Pixel-major feature buffer.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Maps a pixel-major gradient with respect to the stored features back
    /// to a channel-major gradient with respect to the raw head output.
    pub fn backprop(&self, grad: &[f64]) -> Vec<f64> {
        let hw = self.height * self.width;
        let c = self.channels;
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let g = &grad[p * c..(p + 1) * c];
            let u = &self.features[p * c..(p + 1) * c];
            let raw_grad = if self.normalized { normalize_backward(u, self.norms[p], g) } else { g.to_vec() };
            for ch in 0..c {
                out[ch * hw + p] = raw_grad[ch];
            }
        }
        out
    }
}

fn check_dims(c: usize, h: usize, w: usize, len: usize, labels: Option<&[i32]>) -> Result<()> {
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("empty feature map {c}x{h}x{w}")));
    }
    if len != c * h * w {
        return Err(Error::Shape(format!("feature buffer {len} != {c}x{h}x{w}")));
    }
    if let Some(l) = labels {
        if l.len() != h * w {
            return Err(Error::Shape(format!("label mask {} != {h}x{w}", l.len())));
        }
    }
    Ok(())
}
