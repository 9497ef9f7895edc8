//! Direct nested-loop evaluation of the local loss, used as ground truth for
//! the dense implementation. Quadratic per anchor; refuses large maps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{ContrastSets, LocalFeatureMap, LocalLossVariant, Temperature};

/// Largest map side the reference evaluator accepts.
pub const ORACLE_MAX_SIDE: usize = 16;

pub fn reference_local_loss(maps: &[LocalFeatureMap], sets: &ContrastSets, tau: Temperature) -> Result<f64> {
    reference_local_loss_with(maps, sets, tau, LocalLossVariant::default())
}

pub fn reference_local_loss_with(
    maps: &[LocalFeatureMap],
    sets: &ContrastSets,
    tau: Temperature,
    variant: LocalLossVariant,
) -> Result<f64> {
    if let Some(m) = maps.iter().find(|m| m.height() > ORACLE_MAX_SIDE || m.width() > ORACLE_MAX_SIDE) {
        return Err(Error::invalid(format!(
            "reference evaluator limited to {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE} maps, got {}x{}",
            m.height(),
            m.width()
        )));
    }
    let t = tau.value();
    // group -> image -> terms
    let mut terms: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for a in sets.iter_anchors() {
        if a.positives.is_empty() || a.negatives.is_empty() {
            continue;
        }
        let fa = maps[a.anchor.image].feature(a.anchor.row, a.anchor.col);
        let sim = |p: &super::PixelRef| -> f64 {
            let fp = maps[p.image].feature(p.row, p.col);
            let mut acc = 0.0;
            for c in 0..fa.len() {
                acc += fa[c] * fp[c];
            }
            acc / t
        };
        let mut neg = 0.0;
        for n in &a.negatives {
            neg += sim(n).exp();
        }
        let np = a.positives.len() as f64;
        let term = match variant {
            LocalLossVariant::SumInsideLog => {
                let mut pos = 0.0;
                for p in &a.positives {
                    pos += sim(p).exp();
                }
                -(pos / neg).ln() / np
            }
            LocalLossVariant::PerPositiveLog => {
                let mut acc = 0.0;
                for p in &a.positives {
                    acc += (sim(p).exp() / neg).ln();
                }
                -acc / np
            }
        };
        terms
            .entry(a.group)
            .or_default()
            .entry(a.anchor.image)
            .or_default()
            .push(term);
    }
    if terms.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for per_image in terms.values() {
        let mut group = 0.0;
        for t in per_image.values() {
            group += t.iter().sum::<f64>() / t.len() as f64;
        }
        total += group / per_image.len() as f64;
    }
    Ok(total / terms.len() as f64)
}
