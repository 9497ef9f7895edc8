//! Pixel-level contrastive loss.
//!
//! Per anchor `a` with positive set `P` and negative set `N`:
//!
//! ```text
//! term(a) = -(1/|P|) * log( sum_{p in P} exp(f_a . f_p / tau) / sum_{n in N} exp(f_a . f_n / tau) )
//! ```
//!
//! Terms are averaged over the anchors of each image, then over the images
//! of the batch that have anchors. With block division each block is a
//! separate group and group losses are averaged over the blocks that
//! contribute anchors. Anchors with an empty positive or negative set are
//! dropped, since the term is undefined for them.
//!
//! The evaluation is dense: for a chunk of anchors the full similarity rows
//! against the group are computed with one matrix product, and the gradient
//! is pushed back with two more.

use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ContrastGroup, ContrastSets, LocalFeatureMap, Temperature};

/// Entries of the similarity matrix materialized at once.
const CHUNK_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalLossVariant {
    /// Positive sum inside a single logarithm; positives absent from the
    /// denominator.
    #[default]
    SumInsideLog,
    /// `-(1/|P|) sum_p log( exp(f_a . f_p / tau) / sum_N exp(...) )`.
    PerPositiveLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalLossOutput {
    pub value: f64,
    /// Pixel-major gradient per map with respect to the stored (unit)
    /// features, present when requested.
    pub grads: Option<Vec<Vec<f64>>>,
    pub anchors_used: usize,
    pub anchors_dropped: usize,
}

pub fn local_contrastive_loss(maps: &[LocalFeatureMap], sets: &ContrastSets, tau: Temperature) -> Result<f64> {
    local_contrastive_loss_with(maps, sets, tau, LocalLossVariant::default(), false).map(|o| o.value)
}

pub fn local_contrastive_loss_with(
    maps: &[LocalFeatureMap],
    sets: &ContrastSets,
    tau: Temperature,
    variant: LocalLossVariant,
    want_grad: bool,
) -> Result<LocalLossOutput> {
    let channels = match maps.first() {
        Some(m) => m.channels(),
        None => {
            return Ok(LocalLossOutput { value: 0.0, grads: want_grad.then(Vec::new), anchors_used: 0, anchors_dropped: 0 })
        }
    };
    if maps.iter().any(|m| m.channels() != channels) {
        return Err(Error::Shape("feature maps disagree on channel count".into()));
    }

    let mut dropped = 0;
    let prepared: Vec<Prepared> = sets
        .groups
        .iter()
        .map(|g| {
            let p = Prepared::new(g);
            dropped += g.anchors.len() - p.anchors.len();
            p
        })
        .collect();
    if dropped > 0 {
        log::debug!("local loss: dropped {dropped} anchors with an empty positive or negative set");
    }
    let active = prepared.iter().filter(|p| !p.anchors.is_empty()).count();
    let used: usize = prepared.iter().map(|p| p.anchors.len()).sum();

    let mut grads = want_grad.then(|| maps.iter().map(|m| vec![0.0; m.features().len()]).collect::<Vec<_>>());
    let mut value = 0.0;
    if active > 0 {
        for (group, prep) in sets.groups.iter().zip(&prepared) {
            if prep.anchors.is_empty() {
                continue;
            }
            value += evaluate_group(maps, group, prep, channels, tau.value(), variant, active, grads.as_mut())?;
        }
    }
    Ok(LocalLossOutput { value, grads, anchors_used: used, anchors_dropped: dropped })
}

/// Valid anchors of a group and their averaging weights (before the
/// division by the number of active groups).
struct Prepared {
    anchors: Vec<usize>,
    weights: Vec<f64>,
    pos_counts: Vec<usize>,
}

impl Prepared {
    fn new(g: &ContrastGroup) -> Self {
        let counts = g.key_counts();
        let n = g.members.len();
        let mut anchors = Vec::new();
        let mut pos_counts = Vec::new();
        for &a in &g.anchors {
            let same = counts[&g.keys[a]];
            if same >= 2 && same < n {
                anchors.push(a);
                pos_counts.push(same - 1);
            }
        }
        let mut per_image: BTreeMap<usize, usize> = BTreeMap::new();
        for &a in &anchors {
            *per_image.entry(g.members[a].image).or_insert(0) += 1;
        }
        let images = per_image.len() as f64;
        let weights = anchors
            .iter()
            .map(|&a| 1.0 / (per_image[&g.members[a].image] as f64 * images))
            .collect();
        Self { anchors, weights, pos_counts }
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate_group(
    maps: &[LocalFeatureMap],
    group: &ContrastGroup,
    prep: &Prepared,
    channels: usize,
    tau: f64,
    variant: LocalLossVariant,
    active_groups: usize,
    grads: Option<&mut Vec<Vec<f64>>>,
) -> Result<f64> {
    let n = group.members.len();
    let mut feats = Array2::<f64>::zeros((n, channels));
    for (m, px) in group.members.iter().enumerate() {
        let map = maps
            .get(px.image)
            .ok_or_else(|| Error::invalid(format!("set references image {} outside batch", px.image)))?;
        if px.row >= map.height() || px.col >= map.width() {
            return Err(Error::invalid(format!("set references pixel {px:?} outside map")));
        }
        feats.row_mut(m).assign(&ndarray::ArrayView1::from(map.feature(px.row, px.col)));
    }

    let want_grad = grads.is_some();
    let mut dfeats = want_grad.then(|| Array2::<f64>::zeros((n, channels)));
    let group_scale = 1.0 / active_groups as f64;
    let chunk = (CHUNK_BUDGET / n.max(1)).max(1);
    let mut value = 0.0;

    for start in (0..prep.anchors.len()).step_by(chunk) {
        let end = (start + chunk).min(prep.anchors.len());
        let rows = &prep.anchors[start..end];
        let mut anchor_feats = Array2::<f64>::zeros((rows.len(), channels));
        for (r, &a) in rows.iter().enumerate() {
            anchor_feats.row_mut(r).assign(&feats.row(a));
        }
        let mut sim = Array2::<f64>::zeros((rows.len(), n));
        general_mat_mul(1.0 / tau, &anchor_feats, &feats.t(), 0.0, &mut sim);

        for (r, &a) in rows.iter().enumerate() {
            let key = group.keys[a];
            let row = sim.row(r);
            let (mut pos_max, mut neg_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (k, &l) in row.iter().enumerate() {
                if k == a {
                    continue;
                }
                if group.keys[k] == key {
                    pos_max = pos_max.max(l);
                } else {
                    neg_max = neg_max.max(l);
                }
            }
            let (mut pos_sum, mut neg_sum, mut pos_logit_sum) = (0.0, 0.0, 0.0);
            for (k, &l) in row.iter().enumerate() {
                if k == a {
                    continue;
                }
                if group.keys[k] == key {
                    pos_sum += (l - pos_max).exp();
                    pos_logit_sum += l;
                } else {
                    neg_sum += (l - neg_max).exp();
                }
            }
            let pos_lse = pos_max + pos_sum.ln();
            let neg_lse = neg_max + neg_sum.ln();
            let n_pos = prep.pos_counts[start + r] as f64;
            let term = match variant {
                LocalLossVariant::SumInsideLog => -(pos_lse - neg_lse) / n_pos,
                LocalLossVariant::PerPositiveLog => -(pos_logit_sum / n_pos - neg_lse),
            };
            let w = prep.weights[start + r] * group_scale;
            value += w * term;

            if want_grad {
                // Overwrite the similarity row with dL/d(f_a . f_k).
                let mut row = sim.row_mut(r);
                for k in 0..n {
                    let l = row[k];
                    row[k] = if k == a {
                        0.0
                    } else if group.keys[k] == key {
                        match variant {
                            LocalLossVariant::SumInsideLog => -w * (l - pos_lse).exp() / (n_pos * tau),
                            LocalLossVariant::PerPositiveLog => -w / (n_pos * tau),
                        }
                    } else {
                        let scale = match variant {
                            LocalLossVariant::SumInsideLog => 1.0 / n_pos,
                            LocalLossVariant::PerPositiveLog => 1.0,
                        };
                        w * scale * (l - neg_lse).exp() / tau
                    };
                }
            }
        }

        if let Some(df) = dfeats.as_mut() {
            // d/dF += G^T A ; d/dA += G F
            general_mat_mul(1.0, &sim.t(), &anchor_feats, 1.0, df);
            let mut danchor = Array2::<f64>::zeros((rows.len(), channels));
            general_mat_mul(1.0, &sim, &feats, 0.0, &mut danchor);
            for (r, &a) in rows.iter().enumerate() {
                let mut target = df.slice_mut(s![a, ..]);
                target += &danchor.row(r);
            }
        }
    }

    if let (Some(grads), Some(df)) = (grads, dfeats) {
        for (m, px) in group.members.iter().enumerate() {
            let map = &maps[px.image];
            let p = px.row * map.width() + px.col;
            let dst = &mut grads[px.image][p * channels..(p + 1) * channels];
            for (d, g) in dst.iter_mut().zip(df.row(m)) {
                *d += g;
            }
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::super::{build_contrast_sets, PairIndex, SetSpec};
    use super::*;

    fn two_pixel_maps(pos_sim: f64, neg_sim: f64) -> (Vec<LocalFeatureMap>, ContrastSets) {
        // Anchor (class 1), positive (class 1), negative (background) in one
        // 1x3 map; the partner map is background only.
        let anchor = [1.0, 0.0];
        let unit = |s: f64| [s, (1.0 - s * s).sqrt()];
        let mut f = Vec::new();
        f.extend(anchor);
        f.extend(unit(pos_sim));
        f.extend(unit(neg_sim));
        let m0 = LocalFeatureMap::from_unit(2, 1, 3, f, Some(vec![1, 1, 0]), 0).unwrap();
        let m1 = LocalFeatureMap::from_unit(2, 1, 3, vec![0.0, 1.0].repeat(3), Some(vec![0, 0, 0]), 1).unwrap();
        let maps = vec![m0, m1];
        let mut sets = build_contrast_sets(&maps, &PairIndex::adjacent(1), &SetSpec::full()).unwrap();
        // keep a single anchor and a single negative
        let g = &mut sets.groups[0];
        g.members.truncate(3);
        g.keys.truncate(3);
        g.anchors = vec![0];
        (maps, sets)
    }

    #[test]
    fn closed_form_single_anchor() {
        let tau = Temperature::new(1.0).unwrap();
        let (maps, sets) = two_pixel_maps(1.0, 0.0);
        let l = local_contrastive_loss(&maps, &sets, tau).unwrap();
        assert!((l + 1.0).abs() < 1e-12, "{l}");
        let (maps, sets) = two_pixel_maps(0.0, 0.0);
        let l = local_contrastive_loss(&maps, &sets, tau).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn empty_anchor_set_is_zero() {
        let maps = vec![
            LocalFeatureMap::from_unit(1, 2, 2, vec![1.0; 4], Some(vec![0; 4]), 0).unwrap(),
            LocalFeatureMap::from_unit(1, 2, 2, vec![1.0; 4], Some(vec![0; 4]), 1).unwrap(),
        ];
        let sets = build_contrast_sets(&maps, &PairIndex::adjacent(1), &SetSpec::full()).unwrap();
        let out = local_contrastive_loss_with(&maps, &sets, Temperature::default(), LocalLossVariant::default(), true)
            .unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grads.unwrap().iter().all(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn single_class_anchors_are_dropped() {
        let maps = vec![
            LocalFeatureMap::from_unit(1, 2, 2, vec![1.0; 4], Some(vec![2; 4]), 0).unwrap(),
            LocalFeatureMap::from_unit(1, 2, 2, vec![1.0; 4], Some(vec![2; 4]), 1).unwrap(),
        ];
        let sets = build_contrast_sets(&maps, &PairIndex::adjacent(1), &SetSpec::full()).unwrap();
        let out = local_contrastive_loss_with(&maps, &sets, Temperature::default(), LocalLossVariant::default(), false)
            .unwrap();
        assert_eq!(out.anchors_dropped, 8);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn monotone_in_similarities() {
        let tau = Temperature::new(0.5).unwrap();
        let base = {
            let (m, s) = two_pixel_maps(0.3, 0.2);
            local_contrastive_loss(&m, &s, tau).unwrap()
        };
        let closer_pos = {
            let (m, s) = two_pixel_maps(0.4, 0.2);
            local_contrastive_loss(&m, &s, tau).unwrap()
        };
        let closer_neg = {
            let (m, s) = two_pixel_maps(0.3, 0.3);
            local_contrastive_loss(&m, &s, tau).unwrap()
        };
        assert!(closer_pos < base);
        assert!(closer_neg > base);
    }
}
