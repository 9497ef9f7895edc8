//! Dice overlap per foreground class, pooled over all slices of a volume.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class Dice for classes `1..num_classes` (index `k - 1`). A class
/// absent from both prediction and truth is `None` and left out of `mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Running intersection and size counts, so several slices can be pooled
/// before the ratio is taken.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceAccumulator {
    num_classes: usize,
    inter: Vec<u64>,
    pred: Vec<u64>,
    truth: Vec<u64>,
}

impl DiceAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, inter: vec![0; num_classes], pred: vec![0; num_classes], truth: vec![0; num_classes] }
    }

    pub fn add(&mut self, pred: ArrayView2<i32>, truth: ArrayView2<i32>) -> Result<()> {
        if pred.dim() != truth.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
        }
        let k = self.num_classes as i32;
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            if !(0..k).contains(&p) || !(0..k).contains(&t) {
                return Err(Error::invalid(format!("class id out of range [0, {k}): pred {p}, truth {t}")));
            }
            self.pred[p as usize] += 1;
            self.truth[t as usize] += 1;
            if p == t {
                self.inter[p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> DiceScores {
        let per_class: Vec<Option<f64>> = (1..self.num_classes)
            .map(|k| {
                let denom = self.pred[k] + self.truth[k];
                (denom > 0).then(|| 2.0 * self.inter[k] as f64 / denom as f64)
            })
            .collect();
        DiceScores { mean: mean_present(&per_class), per_class }
    }
}

pub(crate) fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn dice_score(pred: ArrayView2<i32>, truth: ArrayView2<i32>, num_classes: usize) -> Result<DiceScores> {
    let mut acc = DiceAccumulator::new(num_classes);
    acc.add(pred, truth)?;
    Ok(acc.scores())
}

/// Averages volume-level scores: each class over the volumes where it is
/// defined, and the overall mean over volumes with a defined mean.
pub fn average_scores(volumes: &[DiceScores]) -> DiceScores {
    let classes = volumes.first().map_or(0, |v| v.per_class.len());
    let per_class = (0..classes)
        .map(|k| mean_present(&volumes.iter().map(|v| v.per_class[k]).collect::<Vec<_>>()))
        .collect();
    let mean = mean_present(&volumes.iter().map(|v| v.mean).collect::<Vec<_>>());
    DiceScores { per_class, mean }
}
