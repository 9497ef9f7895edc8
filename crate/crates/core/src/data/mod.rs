//! Volumes, slices, splits and augmentation.

mod augment;
mod io;
mod preprocess;
mod split;
mod synthetic;

pub use augment::{
    apply_spatial, augment_pair, augment_view, augment_view_traced, make_batch, AugmentMode, AugmentPolicy,
    SpatialTransform,
};
pub use io::{read_corpus_dir, read_volume_dir, write_corpus_dir, write_volume_dir, VolumeMeta};
pub use preprocess::{preprocess_slice, resize_bilinear, resize_nearest};
pub use split::{split_and_select, DatasetSplits, SplitRatios};
pub use synthetic::{generate_synthetic_corpus, CorpusSpec};

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::losses::PairIndex;

/// A 3-D intensity volume (depth x height x width) with an optional label
/// volume of the same shape. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub voxels: Array3<f32>,
    pub labels: Option<Array3<i32>>,
}

impl Volume {
    pub fn new(id: impl Into<String>, voxels: Array3<f32>, labels: Option<Array3<i32>>) -> Result<Self> {
        let id = id.into();
        if voxels.dim().0 == 0 {
            return Err(Error::Data(format!("volume {id} has depth 0")));
        }
        if let Some(l) = &labels {
            if l.dim() != voxels.dim() {
                return Err(Error::Data(format!(
                    "volume {id}: labels {:?} do not match voxels {:?}",
                    l.dim(),
                    voxels.dim()
                )));
            }
            if l.iter().any(|&v| v < 0) {
                return Err(Error::Data(format!("volume {id}: negative class id")));
            }
        }
        Ok(Self { id, voxels, labels })
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn max_label(&self) -> i32 {
        self.labels.as_ref().and_then(|l| l.iter().copied().max()).unwrap_or(0)
    }

    /// Copy without annotations, for consumers that must not see labels.
    pub fn without_labels(&self) -> Self {
        Self { id: self.id.clone(), voxels: self.voxels.clone(), labels: None }
    }

    pub fn raw_slice(&self, idx: usize) -> Slice2D {
        Slice2D {
            pixels: self.voxels.index_axis(Axis(0), idx).to_owned(),
            labels: self.labels.as_ref().map(|l| l.index_axis(Axis(0), idx).to_owned()),
            source_volume: self.id.clone(),
            slice_index: idx,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub pixels: Array2<f32>,
    pub labels: Option<Array2<i32>>,
    pub source_volume: String,
    pub slice_index: usize,
}

impl Slice2D {
    pub fn side(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn has_foreground(&self) -> bool {
        self.labels.as_ref().is_some_and(|l| l.iter().any(|&v| v != 0))
    }
}

/// The augmented set of `2b` views with the pairing between views of the
/// same source slice.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub images: Vec<Slice2D>,
    pub pairing: PairIndex,
}

impl AugmentedBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
