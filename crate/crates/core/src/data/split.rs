use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::Volume;

/// Relative sizes of the train / validation / test splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios(pub [f64; 3]);

impl SplitRatios {
    pub const HIPPOCAMPUS: Self = Self([3.0, 1.0, 1.0]);
    pub const MMWHS: Self = Self([2.0, 1.0, 1.0]);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub labeled_train: Vec<String>,
    pub unlabeled_train: Vec<String>,
}

/// Splits a corpus at volume level and picks the labeled subset of the
/// training split. Every list keeps the corpus order.
pub fn split_and_select(
    corpus: &[Volume],
    ratios: SplitRatios,
    label_fraction: f64,
    seed: u64,
) -> Result<DatasetSplits> {
    let r = ratios.0;
    if r.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!("split ratios must be non-negative, got {r:?}")));
    }
    let total: f64 = r.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("split ratios sum to zero"));
    }
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::invalid(format!("label fraction must be in (0, 1], got {label_fraction}")));
    }
    let n = corpus.len();
    let n_train = (n as f64 * r[0] / total).round() as usize;
    let n_val = (n as f64 * r[1] / total).round() as usize;
    if n_train < 1 || n_val < 1 || n_train + n_val >= n {
        return Err(Error::Data(format!(
            "corpus of {n} volumes too small for ratios {r:?}: every split needs at least one volume"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng::stream(seed, &[rng::tag("split")]);
    order.shuffle(&mut split_rng);
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = order[n_train + n_val..].to_vec();

    let n_labeled = ((label_fraction * n_train as f64).round() as usize).clamp(1, n_train);
    let mut pick = train.clone();
    let mut label_rng = rng::stream(seed, &[rng::tag("labeled")]);
    pick.shuffle(&mut label_rng);
    let mut labeled: Vec<usize> = pick[..n_labeled].to_vec();

    for v in [&mut train, &mut val, &mut test, &mut labeled] {
        v.sort_unstable();
    }
    let unlabeled: Vec<usize> = train.iter().copied().filter(|i| labeled.binary_search(i).is_err()).collect();
    let ids = |v: &[usize]| v.iter().map(|&i| corpus[i].id.clone()).collect::<Vec<_>>();
    Ok(DatasetSplits {
        train: ids(&train),
        val: ids(&val),
        test: ids(&test),
        labeled_train: ids(&labeled),
        unlabeled_train: ids(&unlabeled),
    })
}
