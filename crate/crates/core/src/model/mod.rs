//! Encoder-decoder segmentation network with contrastive projection heads.

mod checkpoint;
mod network;
pub mod ops;
mod params;

pub use checkpoint::{checkpoint_bytes, content_hash, load_checkpoint, save_checkpoint, CheckpointHeader};
pub use ops::Fmap;
pub use params::{Grads, Param, ParamStore};

pub(crate) use network::{GlobalTrace, LocalTrace, SegmentTrace};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentedBatch, Slice2D};
use crate::error::{Error, Result};
use crate::losses::{normalize, LocalFeatureMap};
use network::Layout;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub base_channels: usize,
    /// Foreground classes plus background.
    pub num_classes: usize,
    pub projection_dim: usize,
    /// Channel count `c` of the level-1 embedding map; level `l` uses
    /// `c * 2^(l-1)`.
    pub local_head_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_blocks: 3,
            decoder_blocks: 3,
            base_channels: 32,
            num_classes: 4,
            projection_dim: 128,
            local_head_channels: 32,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::config(format!("model.{k}"), m));
        if self.encoder_blocks == 0 || self.encoder_blocks > 6 {
            return bad("encoder_blocks", format!("must be in [1, 6], got {}", self.encoder_blocks));
        }
        if self.decoder_blocks != self.encoder_blocks {
            return bad(
                "decoder_blocks",
                format!("must equal encoder_blocks ({}), got {}", self.encoder_blocks, self.decoder_blocks),
            );
        }
        if self.base_channels == 0 {
            return bad("base_channels", "must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes", format!("must be >= 2, got {}", self.num_classes));
        }
        if self.projection_dim < 2 {
            return bad("projection_dim", format!("must be >= 2, got {}", self.projection_dim));
        }
        if self.local_head_channels == 0 {
            return bad("local_head_channels", "must be >= 1".into());
        }
        Ok(())
    }

    pub fn local_channels(&self, level: usize) -> usize {
        self.local_head_channels << (level - 1)
    }

    /// Input side lengths must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << self.encoder_blocks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Fresh,
    GlobalPretrained,
    LocalPretrained,
    Finetuned,
}

/// Parameters plus provenance of a network.
#[derive(Debug, Clone)]
pub struct NetworkState {
    config: NetworkConfig,
    params: ParamStore,
    layout: Layout,
    pub stage: StageTag,
    pub seed: u64,
    pub epoch: usize,
    /// Content hash of the checkpoint this state was initialized from.
    pub parent_hash: Option<String>,
}

pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<NetworkState> {
    cfg.validate()?;
    let mut params = ParamStore::default();
    let layout = Layout::build(cfg, &mut params, seed);
    Ok(NetworkState {
        config: cfg.clone(),
        params,
        layout,
        stage: StageTag::Fresh,
        seed,
        epoch: 0,
        parent_hash: None,
    })
}

pub fn forward_global(net: &NetworkState, batch: &AugmentedBatch) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    batch
        .images
        .iter()
        .map(|s| {
            let (z, _) = net.global_forward(&net.input(s)?);
            Ok(normalize(&z.iter().map(|&v| v as f64).collect::<Vec<_>>()).0)
        })
        .collect()
}

pub fn forward_local(net: &NetworkState, batch: &AugmentedBatch, level: usize) -> Result<Vec<LocalFeatureMap>> {
    net.check_level(level)?;
    batch
        .images
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (f, _) = net.local_forward(&net.input(s)?, level);
            let labels = level_labels(s, f.h, f.w);
            LocalFeatureMap::from_raw_channel_major(&f.data, f.c, f.h, f.w, labels, i, true)
        })
        .collect()
}

pub fn predict_segmentation(net: &NetworkState, slices: &[Slice2D]) -> Result<Vec<Array2<i32>>> {
    slices
        .iter()
        .map(|s| {
            let (logits, _, _) = net.segment_forward(&net.input(s)?);
            Ok(argmax_classes(&logits))
        })
        .collect()
}

/// Labels aligned with a level's feature map: the mask itself at full
/// resolution, nearest-neighbour subsampled at deeper levels.
pub(crate) fn level_labels(s: &Slice2D, h: usize, w: usize) -> Option<Vec<i32>> {
    s.labels.as_ref().map(|l| {
        if l.dim() == (h, w) {
            l.iter().copied().collect()
        } else {
            crate::data::resize_nearest(l.view(), h, w).iter().copied().collect()
        }
    })
}

pub(crate) fn argmax_classes(logits: &Fmap) -> Array2<i32> {
    let hw = logits.hw();
    Array2::from_shape_fn((logits.h, logits.w), |(y, x)| {
        let p = y * logits.w + x;
        let mut best = 0;
        for k in 1..logits.c {
            if logits.data[k * hw + p] > logits.data[best * hw + p] {
                best = k;
            }
        }
        best as i32
    })
}

impl NetworkState {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn from_parts(config: NetworkConfig, params: ParamStore, stage: StageTag, seed: u64, epoch: usize, parent_hash: Option<String>) -> Result<Self> {
        let mut net = build_network(&config, seed)?;
        for p in params.iter() {
            let slot = net
                .params
                .get_mut(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", p.name)))?;
            if slot.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, network expects {:?}",
                    p.name, p.shape, slot.shape
                )));
            }
            slot.data.copy_from_slice(&p.data);
        }
        if params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, network expects {}",
                params.len(),
                net.params.len()
            )));
        }
        net.stage = stage;
        net.epoch = epoch;
        net.parent_hash = parent_hash;
        Ok(net)
    }

    /// Converts a slice to a network input, checking the size contract.
    pub fn input(&self, s: &Slice2D) -> Result<Fmap> {
        let (h, w) = s.side();
        let d = self.config.size_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {d} (2^{} encoder blocks)",
                self.config.encoder_blocks
            )));
        }
        Ok(Fmap::new(1, h, w, s.pixels.iter().copied().collect()))
    }

    pub(crate) fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.config.decoder_blocks {
            return Err(Error::invalid(format!(
                "decoder level must be in [1, {}], got {level}",
                self.config.decoder_blocks
            )));
        }
        Ok(())
    }

    pub(crate) fn global_forward(&self, x: &Fmap) -> (Vec<f32>, GlobalTrace) {
        self.layout.global_fwd(&self.params, x)
    }

    pub(crate) fn global_backward(&self, t: &GlobalTrace, dz: &[f32], g: &mut Grads) {
        self.layout.global_bwd(&self.params, g, t, dz)
    }

    pub(crate) fn local_forward(&self, x: &Fmap, level: usize) -> (Fmap, LocalTrace) {
        self.layout.local_fwd(&self.params, x, level)
    }

    pub(crate) fn local_backward(&self, t: &LocalTrace, dout: &Fmap, g: &mut Grads) {
        self.layout.local_bwd(&self.params, g, t, dout)
    }

    /// Returns `(logits, level-1 embedding, trace)`.
    pub(crate) fn segment_forward(&self, x: &Fmap) -> (Fmap, Fmap, SegmentTrace) {
        self.layout.segment_fwd(&self.params, x)
    }

    pub(crate) fn segment_backward(&self, t: &SegmentTrace, dlogits: &Fmap, g: &mut Grads) {
        self.layout.segment_bwd(&self.params, g, t, dlogits)
    }

    /// Parameters whose name starts with `encoder.`.
    pub fn encoder_params(&self) -> Vec<&Param> {
        self.params.iter().filter(|p| p.name.starts_with("encoder.")).collect()
    }
}
