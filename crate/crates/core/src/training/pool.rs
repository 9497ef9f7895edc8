//! Preprocessed slices grouped by volume, and per-stage slice pools that
//! only ever contain the volumes (and labels) a stage may read.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{preprocess_slice, Slice2D, Volume};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Every volume of a corpus, sliced and resampled to a common resolution.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    resolution: usize,
    volumes: BTreeMap<String, Vec<Slice2D>>,
}

impl PreparedCorpus {
    pub fn new(volumes: &[Volume], resolution: usize) -> Result<Self> {
        let mut map = BTreeMap::new();
        for v in volumes {
            let slices = (0..v.depth()).map(|i| preprocess_slice(v, i, resolution)).collect::<Result<Vec<_>>>()?;
            if map.insert(v.id.clone(), slices).is_some() {
                return Err(Error::Data(format!("duplicate volume id {}", v.id)));
            }
        }
        Ok(Self { resolution, volumes: map })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.volumes.keys().map(String::as_str)
    }

    pub fn volume(&self, id: &str) -> Result<&[Slice2D]> {
        self.volumes
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("unknown volume id {id}")))
    }
}

/// Whether a pool keeps, drops or demands label masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelUse {
    Strip,
    Require,
}

/// Slices available to one stage, grouped by volume.
#[derive(Debug, Clone)]
pub struct SlicePool {
    volumes: Vec<Vec<Slice2D>>,
}

impl SlicePool {
    pub fn new(corpus: &PreparedCorpus, ids: &[String], labels: LabelUse) -> Result<Self> {
        let mut volumes = Vec::with_capacity(ids.len());
        for id in ids {
            let slices = corpus.volume(id)?;
            let owned: Vec<Slice2D> = match labels {
                LabelUse::Strip => slices.iter().map(|s| Slice2D { labels: None, ..s.clone() }).collect(),
                LabelUse::Require => {
                    if slices.iter().any(|s| s.labels.is_none()) {
                        return Err(Error::Data(format!("volume {id} has no labels")));
                    }
                    slices.to_vec()
                }
            };
            if !owned.is_empty() {
                volumes.push(owned);
            }
        }
        Ok(Self { volumes })
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn num_slices(&self) -> usize {
        self.volumes.iter().map(Vec::len).sum()
    }

    pub fn volumes(&self) -> &[Vec<Slice2D>] {
        &self.volumes
    }

    /// Order of slices for one epoch. With `count == 0` every slice appears
    /// once in shuffled order; otherwise `count` draws, each picking a volume
    /// uniformly and then one of its slices uniformly.
    pub fn epoch(&self, count: usize, rng: &mut Rng) -> Vec<&Slice2D> {
        if count == 0 {
            let mut all: Vec<&Slice2D> = self.volumes.iter().flatten().collect();
            all.shuffle(rng);
            all
        } else {
            (0..count)
                .map(|_| {
                    let v = &self.volumes[rng.random_range(0..self.volumes.len())];
                    &v[rng.random_range(0..v.len())]
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;

    use super::*;
    use crate::rng;

    fn corpus() -> PreparedCorpus {
        let vols: Vec<Volume> = (0..3)
            .map(|i| {
                let labels = (i != 2).then(|| Array3::from_elem((2, 8, 8), 1));
                Volume::new(format!("v{i}"), Array3::from_shape_fn((2, 8, 8), |(d, y, x)| (d + y * x + i) as f32), labels).unwrap()
            })
            .collect();
        PreparedCorpus::new(&vols, 8).unwrap()
    }

    #[test]
    fn pools_respect_label_use() {
        let c = corpus();
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let stripped = SlicePool::new(&c, &ids(&["v0", "v2"]), LabelUse::Strip).unwrap();
        assert!(stripped.volumes().iter().flatten().all(|s| s.labels.is_none()));
        assert!(SlicePool::new(&c, &ids(&["v0", "v2"]), LabelUse::Require).is_err());
        assert!(SlicePool::new(&c, &ids(&["v9"]), LabelUse::Strip).is_err());
        let labeled = SlicePool::new(&c, &ids(&["v0", "v1"]), LabelUse::Require).unwrap();
        assert_eq!(labeled.num_slices(), 4);
    }

    #[test]
    fn epochs_are_deterministic() {
        let c = corpus();
        let pool = SlicePool::new(&c, &["v0".into(), "v1".into()], LabelUse::Require).unwrap();
        let order = |count| {
            let mut r = rng::stream(1, &[]);
            pool.epoch(count, &mut r).iter().map(|s| (s.source_volume.clone(), s.slice_index)).collect::<Vec<_>>()
        };
        assert_eq!(order(0), order(0));
        let mut full = order(0);
        full.sort();
        assert_eq!(full, vec![("v0".into(), 0), ("v0".into(), 1), ("v1".into(), 0), ("v1".into(), 1)]);
        assert_eq!(order(7).len(), 7);
    }
}
