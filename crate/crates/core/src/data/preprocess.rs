use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

use super::{Slice2D, Volume};

const STD_EPS: f64 = 1e-8;

/// Extracts slice `idx`, normalizes it with the mean and standard deviation
/// of the whole volume, and resizes it to `target x target` (bilinear for
/// intensities, nearest-neighbour for labels).
pub fn preprocess_slice(v: &Volume, idx: usize, target: usize) -> Result<Slice2D> {
    if idx >= v.depth() {
        return Err(Error::invalid(format!("slice {idx} out of range for volume {} of depth {}", v.id, v.depth())));
    }
    if target == 0 {
        return Err(Error::invalid("target resolution must be positive"));
    }
    let count = v.voxels.len() as f64;
    let mean = v.voxels.iter().map(|&x| x as f64).sum::<f64>() / count;
    let var = v.voxels.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / count;
    let std = var.sqrt();
    let slice = v.voxels.index_axis(Axis(0), idx);
    let normalized = if std < STD_EPS {
        Array2::zeros(slice.dim())
    } else {
        slice.mapv(|x| ((x as f64 - mean) / std) as f32)
    };
    Ok(Slice2D {
        pixels: resize_bilinear(normalized.view(), target, target),
        labels: v
            .labels
            .as_ref()
            .map(|l| resize_nearest(l.index_axis(Axis(0), idx), target, target)),
        source_volume: v.id.clone(),
        slice_index: idx,
    })
}

/// Half-pixel-centre source coordinate for output index `dst`.
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

pub fn resize_bilinear(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let axis = |i: usize, in_len: usize, out_len: usize| {
        let c = source_coord(i, in_len, out_len).clamp(0.0, (in_len - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, (c - lo as f64) as f32)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = axis(y, h, out_h);
        let (x0, x1, fx) = axis(x, w, out_w);
        let top = src[(y0, x0)] * (1.0 - fx) + src[(y0, x1)] * fx;
        let bottom = src[(y1, x0)] * (1.0 - fx) + src[(y1, x1)] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn resize_nearest<T: Copy>(src: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let pick = |i: usize, in_len: usize, out_len: usize| {
        (((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| src[(pick(y, h, out_h), pick(x, w, out_w))])
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;

    use super::*;

    #[test]
    fn output_resolutions() {
        let vox = Array3::from_shape_fn((3, 40, 40), |(z, y, x)| (z * 7 + y * 3 + x) as f32);
        let lab = Array3::from_shape_fn((3, 40, 40), |(_, y, _)| (y / 10) as i32);
        let v = Volume::new("v", vox, Some(lab)).unwrap();
        for target in [64, 160] {
            let s = preprocess_slice(&v, 1, target).unwrap();
            assert_eq!(s.pixels.dim(), (target, target));
            let l = s.labels.unwrap();
            assert_eq!(l.dim(), (target, target));
            assert!(l.iter().all(|&c| (0..4).contains(&c)));
        }
        assert!(preprocess_slice(&v, 3, 32).is_err());
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = Volume::new("c", Array3::from_elem((2, 8, 8), 5.0), None).unwrap();
        let s = preprocess_slice(&v, 0, 8).unwrap();
        assert!(s.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn normalization_uses_volume_statistics() {
        // slice 0 is all 0, slice 1 is all 2: per-volume stats give -1 and +1
        let vox = Array3::from_shape_fn((2, 4, 4), |(z, _, _)| 2.0 * z as f32);
        let v = Volume::new("v", vox, None).unwrap();
        let s0 = preprocess_slice(&v, 0, 4).unwrap();
        let s1 = preprocess_slice(&v, 1, 4).unwrap();
        assert!(s0.pixels.iter().all(|&p| (p + 1.0).abs() < 1e-6));
        assert!(s1.pixels.iter().all(|&p| (p - 1.0).abs() < 1e-6));
    }

    #[test]
    fn bilinear_preserves_linear_ramps() {
        let src = Array2::from_shape_fn((8, 8), |(_, x)| x as f32);
        let up = resize_bilinear(src.view(), 16, 16);
        // interior points follow the ramp at half-pixel offsets
        for x in 1..15 {
            let expected = (x as f32 + 0.5) / 2.0 - 0.5;
            assert!((up[(4, x)] - expected).abs() < 1e-5);
        }
    }
}
