//! Per-cell results of the experiment matrix and their aggregation into a
//! variant x label-fraction table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Variant;

use super::embed::Separation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: Variant,
    pub fraction: f64,
    pub fold: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Content hashes of the checkpoints a cell passed through.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Lineage {
    /// Freshly initialized network the chain started from.
    pub init: String,
    pub global: Option<String>,
    pub local: Option<String>,
    pub finetuned: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    #[serde(flatten)]
    pub key: CellKey,
    pub seed: u64,
    pub status: CellStatus,
    pub error: Option<String>,
    /// Test Dice per foreground class, averaged over volumes.
    pub per_class_dice: Vec<Option<f64>>,
    pub mean_dice: Option<f64>,
    pub val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub embedding: Option<Separation>,
    pub lineage: Lineage,
    pub wall_time_s: f64,
}

/// Mean and sample standard deviation of one variant at one fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: Variant,
    pub fraction: f64,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single fold.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variants: Vec<Variant>,
    pub fractions: Vec<f64>,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Column label for a label fraction, e.g. `0.05 -> "5%"`.
pub fn fraction_label(f: f64) -> String {
    let pct = (f * 100.0 * 1e6).round() / 1e6;
    format!("{pct}%")
}

/// Aggregates completed cells over folds. Failed or missing cells are left
/// out and show up as blanks in the rendered table.
pub fn summarize_results(cells: &[CellResult], variants: &[Variant], fractions: &[f64]) -> MetricsReport {
    let mut aggregates = Vec::new();
    for &variant in variants {
        for &fraction in fractions {
            let values: Vec<f64> = cells
                .iter()
                .filter(|c| c.key.variant == variant && c.key.fraction == fraction && c.status == CellStatus::Ok)
                .filter_map(|c| c.mean_dice)
                .collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            aggregates.push(Aggregate {
                variant,
                fraction,
                n: values.len(),
                mean,
                std,
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    let mut cells = cells.to_vec();
    cells.sort_by(|a, b| {
        let pos = |v: Variant| variants.iter().position(|&x| x == v);
        a.key
            .fold
            .cmp(&b.key.fold)
            .then(a.key.fraction.total_cmp(&b.key.fraction))
            .then(pos(a.key.variant).cmp(&pos(b.key.variant)))
    });
    MetricsReport { variants: variants.to_vec(), fractions: fractions.to_vec(), cells, aggregates }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    pub fn aggregate(&self, variant: Variant, fraction: f64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == variant && a.fraction == fraction)
    }

    /// One row per cell. Wall times are left out so identical runs give
    /// identical files.
    pub fn cells_tsv(&self) -> String {
        let classes = self.cells.iter().map(|c| c.per_class_dice.len()).max().unwrap_or(0);
        let mut out = String::from("variant\tfraction\tfold\tseed\tstatus\tmean_dice");
        for k in 1..=classes {
            let _ = write!(out, "\tdice_class{k}");
        }
        out.push_str("\tval_dice\tbest_epoch\temb_intra\temb_inter\tinit_hash\tglobal_hash\tlocal_hash\tfinetuned_hash\n");
        for c in &self.cells {
            let status = match c.status {
                CellStatus::Ok => "ok",
                CellStatus::Failed => "failed",
            };
            let _ = write!(out, "{}\t{}\t{}\t{}\t{status}\t{}", c.key.variant, c.key.fraction, c.key.fold, c.seed, opt(c.mean_dice));
            for k in 0..classes {
                let _ = write!(out, "\t{}", opt(c.per_class_dice.get(k).copied().flatten()));
            }
            let l = &c.lineage;
            let _ = writeln!(
                out,
                "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                opt(c.val_dice),
                c.best_epoch.map_or(String::new(), |e| e.to_string()),
                opt(c.embedding.map(|s| s.intra)),
                opt(c.embedding.map(|s| s.inter)),
                l.init,
                l.global.as_deref().unwrap_or(""),
                l.local.as_deref().unwrap_or(""),
                l.finetuned.as_deref().unwrap_or(""),
            );
        }
        out
    }

    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("variant\tfraction\tn\tmean_dice\tstd_dice\tmin_dice\tmax_dice\n");
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                a.variant, a.fraction, a.n, a.mean, a.std, a.min, a.max
            );
        }
        out
    }

    /// Markdown grid of mean Dice (± std over folds), per-column maximum in
    /// bold, blanks for cells without results.
    pub fn table_markdown(&self) -> String {
        let mut out = String::from("| Method |");
        for &f in &self.fractions {
            let _ = write!(out, " {} |", fraction_label(f));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.fractions.len()));
        out.push('\n');
        let best: Vec<Option<f64>> = self
            .fractions
            .iter()
            .map(|&f| {
                self.aggregates
                    .iter()
                    .filter(|a| a.fraction == f)
                    .map(|a| round4(a.mean))
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            })
            .collect();
        for &v in &self.variants {
            let _ = write!(out, "| {v} |");
            for (i, &f) in self.fractions.iter().enumerate() {
                match self.aggregate(v, f) {
                    None => out.push_str(" |"),
                    Some(a) => {
                        let text = if a.n > 1 { format!("{:.4} ± {:.4}", a.mean, a.std) } else { format!("{:.4}", a.mean) };
                        if best[i] == Some(round4(a.mean)) {
                            let _ = write!(out, " **{text}** |");
                        } else {
                            let _ = write!(out, " {text} |");
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Means are compared at the precision they are printed with.
fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}
