//! Export of level-1 pixel embeddings, their class separation, and a
//! deterministic 2-D projection for plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentedBatch, Slice2D};
use crate::error::{Error, Result};
use crate::losses::PairIndex;
use crate::model::{forward_local, NetworkState};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    /// Ground-truth class of the pixel.
    pub label: i32,
    pub image_id: String,
    pub u: usize,
    pub v: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub seed: u64,
    pub rows: Vec<EmbeddingRow>,
}

/// Mean cosine similarity between rows of the same class and of different
/// classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub intra: f64,
    pub inter: f64,
}

fn image_id(s: &Slice2D) -> String {
    format!("{}:{}", s.source_volume, s.slice_index)
}

/// Samples up to `per_class_cap` foreground pixels per class, uniformly
/// without replacement, and records their level-1 embeddings.
pub fn export_embeddings(net: &NetworkState, slices: &[Slice2D], per_class_cap: usize, seed: u64) -> Result<EmbeddingTable> {
    let mut candidates: BTreeMap<i32, Vec<(usize, usize, usize)>> = BTreeMap::new();
    for (i, s) in slices.iter().enumerate() {
        let labels = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("embedding export needs labels ({})", image_id(s))))?;
        for ((u, v), &k) in labels.indexed_iter() {
            if k > 0 {
                candidates.entry(k).or_default().push((i, u, v));
            }
        }
    }
    let mut picked: Vec<(i32, usize, usize, usize)> = Vec::new();
    for (&k, cands) in &candidates {
        let mut r = rng::stream(seed, &[rng::tag("embed"), k as u64]);
        let mut chosen: Vec<(usize, usize, usize)> = cands.choose_multiple(&mut r, per_class_cap).copied().collect();
        chosen.sort_unstable();
        picked.extend(chosen.into_iter().map(|(i, u, v)| (k, i, u, v)));
    }
    let mut needed: Vec<usize> = picked.iter().map(|p| p.1).collect();
    needed.sort_unstable();
    needed.dedup();
    let mut maps = BTreeMap::new();
    for i in needed {
        let batch = AugmentedBatch { images: vec![slices[i].clone(), slices[i].clone()], pairing: PairIndex::adjacent(1) };
        let mut m = forward_local(net, &batch, 1)?;
        maps.insert(i, m.swap_remove(0));
    }
    let rows = picked
        .into_iter()
        .map(|(label, i, u, v)| EmbeddingRow {
            label,
            image_id: image_id(&slices[i]),
            u,
            v,
            feature: maps[&i].feature(u, v).to_vec(),
        })
        .collect();
    Ok(EmbeddingTable { seed, rows })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `None` when the table has no same-class or no cross-class pair.
pub fn embedding_separation(table: &EmbeddingTable) -> Option<Separation> {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0u64, 0.0, 0u64);
    for (i, a) in table.rows.iter().enumerate() {
        for b in &table.rows[i + 1..] {
            let c = cosine(&a.feature, &b.feature);
            if a.label == b.label {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    (n_intra > 0 && n_inter > 0).then(|| Separation { intra: intra / n_intra as f64, inter: inter / n_inter as f64 })
}

/// Projects rows onto the two leading principal directions of the centred
/// features. Power iteration from a fixed start with a sign convention
/// (largest-magnitude component positive) keeps the output deterministic.
pub fn pca_2d(table: &EmbeddingTable) -> Vec<[f64; 2]> {
    let n = table.rows.len();
    if n == 0 {
        return Vec::new();
    }
    let c = table.rows[0].feature.len();
    let mean: Vec<f64> = (0..c).map(|j| table.rows.iter().map(|r| r.feature[j]).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = table.rows.iter().map(|r| r.feature.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = vec![vec![0.0; c]; c];
    for x in &centred {
        for a in 0..c {
            for b in 0..c {
                cov[a][b] += x[a] * x[b] / n as f64;
            }
        }
    }
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(c) {
        let mut v: Vec<f64> = (0..c).map(|j| 1.0 + j as f64 * 0.1).collect();
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..c).map(|a| (0..c).map(|b| cov[a][b] * v[b]).sum()).collect();
            for d in &dirs {
                let p: f64 = w.iter().zip(d).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(d).for_each(|(x, y)| *x -= p * y);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        dirs.push(v);
    }
    centred
        .iter()
        .map(|x| {
            let mut p = [0.0; 2];
            for (k, d) in dirs.iter().enumerate() {
                p[k] = x.iter().zip(d).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect()
}

impl EmbeddingTable {
    /// Tab-separated: `label, u, v, image_id, f0 .. f{c-1}`.
    pub fn to_tsv(&self) -> String {
        let c = self.rows.first().map_or(0, |r| r.feature.len());
        let mut out = String::from("label\tu\tv\timage_id");
        for j in 0..c {
            let _ = write!(out, "\tf{j}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}\t{}\t{}\t{}", r.label, r.u, r.v, r.image_id);
            for x in &r.feature {
                let _ = write!(out, "\t{x:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str, seed: u64) -> Result<Self> {
        let rows = text
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|line| {
                let bad = || Error::Data(format!("malformed embedding row `{line}`"));
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() < 5 {
                    return Err(bad());
                }
                Ok(EmbeddingRow {
                    label: cols[0].parse().map_err(|_| bad())?,
                    u: cols[1].parse().map_err(|_| bad())?,
                    v: cols[2].parse().map_err(|_| bad())?,
                    image_id: cols[3].to_string(),
                    feature: cols[4..].iter().map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, rows })
    }
}
