//! Anchor / positive / negative set construction for the local loss.
//!
//! Sets are stored compactly as groups. Within a group every member carries
//! a key; for an anchor, the positives are the other members with the same
//! key and the negatives are the members with a different key. The whole
//! batch is one group for the full, stride and grid strategies; block
//! division makes one group per spatial block (spanning all images of the
//! batch). Explicit per-anchor lists are available through
//! [`ContrastSets::iter_anchors`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{LocalFeatureMap, PairIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SupervisedFull,
    SupervisedStride,
    SupervisedBlock,
    SelfsupGrid,
}

impl Strategy {
    pub fn is_supervised(self) -> bool {
        !matches!(self, Strategy::SelfsupGrid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetSpec {
    pub strategy: Strategy,
    pub stride: usize,
    pub block_size: usize,
    pub grid_points: usize,
}

impl SetSpec {
    pub fn full() -> Self {
        Self { strategy: Strategy::SupervisedFull, stride: 1, block_size: 0, grid_points: 9 }
    }

    pub fn stride(stride: usize) -> Self {
        Self { strategy: Strategy::SupervisedStride, stride, ..Self::full() }
    }

    pub fn block(block_size: usize) -> Self {
        Self { strategy: Strategy::SupervisedBlock, block_size, ..Self::full() }
    }

    pub fn grid(grid_points: usize) -> Self {
        Self { strategy: Strategy::SelfsupGrid, grid_points, ..Self::full() }
    }
}

/// A pixel position within the batch: map index, row, column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelRef {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastGroup {
    pub members: Vec<PixelRef>,
    pub keys: Vec<u64>,
    /// Indices into `members` of the anchor set.
    pub anchors: Vec<usize>,
}

impl ContrastGroup {
    /// Per-key member counts, used to size positive and negative sets.
    pub fn key_counts(&self) -> HashMap<u64, usize> {
        let mut counts = HashMap::new();
        for &k in &self.keys {
            *counts.entry(k).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSets {
    pub strategy: Strategy,
    pub groups: Vec<ContrastGroup>,
}

/// Explicit sets for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSets {
    pub group: usize,
    pub anchor: PixelRef,
    pub positives: Vec<PixelRef>,
    pub negatives: Vec<PixelRef>,
}

impl ContrastSets {
    pub fn anchor_count(&self) -> usize {
        self.groups.iter().map(|g| g.anchors.len()).sum()
    }

    /// Enumerates the explicit positive and negative lists of every anchor.
    /// Quadratic in group size; meant for small instances and inspection.
    pub fn iter_anchors(&self) -> impl Iterator<Item = AnchorSets> + '_ {
        self.groups.iter().enumerate().flat_map(|(gi, g)| {
            g.anchors.iter().map(move |&a| {
                let key = g.keys[a];
                let mut positives = Vec::new();
                let mut negatives = Vec::new();
                for (m, (&px, &k)) in g.members.iter().zip(&g.keys).enumerate() {
                    if m == a {
                        continue;
                    }
                    if k == key {
                        positives.push(px);
                    } else {
                        negatives.push(px);
                    }
                }
                AnchorSets { group: gi, anchor: g.members[a], positives, negatives }
            })
        })
    }
}

/// Number of feature dot products the local loss needs: the sum over anchors
/// of `|P| + |N|`.
pub fn count_pairwise_interactions(sets: &ContrastSets) -> u64 {
    sets.groups
        .iter()
        .map(|g| g.anchors.len() as u64 * (g.members.len() as u64).saturating_sub(1))
        .sum()
}

/// Evenly spaced grid positions on a `side x side` map with margin `side/6`.
/// 9 points form a 3x3 grid; 13 points add the centres of its four cells.
/// Points that round onto the same pixel are kept once.
pub fn grid_positions(side: usize, grid_points: usize) -> Result<Vec<(usize, usize)>> {
    if grid_points != 9 && grid_points != 13 {
        return Err(Error::invalid(format!("grid_points must be 9 or 13, got {grid_points}")));
    }
    if side < 3 {
        return Err(Error::invalid(format!("map side {side} too small for a grid")));
    }
    let margin = side as f64 / 6.0;
    let span = side as f64 - 1.0 - 2.0 * margin;
    let at = |t: f64| ((margin + t * span).round() as usize).min(side - 1);
    let axis: Vec<usize> = [0.0, 0.5, 1.0].iter().map(|&t| at(t)).collect();
    let mut pts: Vec<(usize, usize)> = axis
        .iter()
        .flat_map(|&r| axis.iter().map(move |&c| (r, c)))
        .collect();
    if grid_points == 13 {
        let mid: Vec<usize> = [0.25, 0.75].iter().map(|&t| at(t)).collect();
        pts.extend(mid.iter().flat_map(|&r| mid.iter().map(move |&c| (r, c))));
    }
    // small maps round several grid points onto the same pixel
    let mut seen = std::collections::HashSet::new();
    pts.retain(|p| seen.insert(*p));
    Ok(pts)
}

pub fn build_contrast_sets(
    maps: &[LocalFeatureMap],
    pairing: &PairIndex,
    spec: &SetSpec,
) -> Result<ContrastSets> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("no feature maps to build contrast sets from"))?;
    let (h, w) = (first.height(), first.width());
    if maps.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(Error::Shape("all feature maps in a batch must share a size".into()));
    }
    if spec.strategy.is_supervised() && maps.iter().any(|m| m.labels().is_none()) {
        return Err(Error::invalid(format!("{:?} requires labels on every map", spec.strategy)));
    }

    let supervised_group = |positions: &[(usize, usize)]| -> ContrastGroup {
        let mut g = ContrastGroup { members: Vec::new(), keys: Vec::new(), anchors: Vec::new() };
        for (image, m) in maps.iter().enumerate() {
            for &(row, col) in positions {
                let label = m.label(row, col).unwrap_or(0);
                if label != 0 {
                    g.anchors.push(g.members.len());
                }
                g.members.push(PixelRef { image, row, col });
                g.keys.push(label as u64);
            }
        }
        g
    };

    let groups = match spec.strategy {
        Strategy::SupervisedFull => vec![supervised_group(&lattice(0..h, 0..w, 1))],
        Strategy::SupervisedStride => {
            if spec.stride < 1 {
                return Err(Error::invalid("stride must be >= 1"));
            }
            vec![supervised_group(&lattice(0..h, 0..w, spec.stride))]
        }
        Strategy::SupervisedBlock => {
            let b = spec.block_size;
            if b == 0 || h % b != 0 || w % b != 0 {
                return Err(Error::invalid(format!("block size {b} does not divide map {h}x{w}")));
            }
            let mut groups = Vec::new();
            for br in (0..h).step_by(b) {
                for bc in (0..w).step_by(b) {
                    let g = supervised_group(&lattice(br..br + b, bc..bc + b, 1));
                    if !g.anchors.is_empty() {
                        groups.push(g);
                    }
                }
            }
            groups
        }
        Strategy::SelfsupGrid => {
            if pairing.len() != maps.len() {
                return Err(Error::invalid(format!(
                    "pairing covers {} images, batch has {}",
                    pairing.len(),
                    maps.len()
                )));
            }
            if h != w {
                return Err(Error::Shape(format!("grid sampling needs square maps, got {h}x{w}")));
            }
            let pts = grid_positions(h, spec.grid_points)?;
            let mut g = ContrastGroup { members: Vec::new(), keys: Vec::new(), anchors: Vec::new() };
            for image in 0..maps.len() {
                let pair = image.min(pairing.partner(image)) as u64;
                for &(row, col) in &pts {
                    g.anchors.push(g.members.len());
                    g.members.push(PixelRef { image, row, col });
                    g.keys.push((pair << 32) | ((row as u64) << 16) | col as u64);
                }
            }
            vec![g]
        }
    };
    Ok(ContrastSets { strategy: spec.strategy, groups })
}

fn lattice(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, step: usize) -> Vec<(usize, usize)> {
    rows.step_by(step)
        .flat_map(|r| cols.clone().step_by(step).map(move |c| (r, c)))
        .collect()
}
