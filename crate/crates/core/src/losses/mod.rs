//! Contrastive losses for image-level and pixel-level representation learning.
//!
//! All routines work in `f64` on plain buffers and return analytic gradients,
//! so they are independent of the network implementation that produces the
//! embeddings. Embeddings are compared by dot product of unit vectors scaled
//! by a temperature.

mod feature_map;
mod global;
mod local;
mod reference;
mod sets;

pub use feature_map::{normalize, normalize_backward, LocalFeatureMap};
pub use global::{global_contrastive_loss, global_contrastive_loss_and_grad, global_loss_from_raw};
pub use local::{local_contrastive_loss, local_contrastive_loss_with, LocalLossOutput, LocalLossVariant};
pub use reference::{reference_local_loss, reference_local_loss_with, ORACLE_MAX_SIDE};
pub use sets::{
    build_contrast_sets, count_pairwise_interactions, grid_positions, AnchorSets, ContrastGroup,
    ContrastSets, PixelRef, SetSpec, Strategy,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that incoming embeddings are unit vectors.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Softmax temperature. Always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::invalid(format!("temperature must be > 0, got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.1)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// The pairing `i -> j(i)` between the two augmented views of each source
/// slice. Always a fixed-point-free involution over an even-sized batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndex(Vec<usize>);

impl PairIndex {
    pub fn new(partner: Vec<usize>) -> Result<Self> {
        let n = partner.len();
        if n == 0 || n % 2 != 0 {
            return Err(Error::invalid(format!("pairing needs an even, nonzero batch, got {n}")));
        }
        for (i, &j) in partner.iter().enumerate() {
            if j >= n {
                return Err(Error::invalid(format!("partner {j} of {i} out of range")));
            }
            if j == i {
                return Err(Error::invalid(format!("image {i} is paired with itself")));
            }
            if partner[j] != i {
                return Err(Error::invalid(format!("pairing is not an involution at {i}")));
            }
        }
        Ok(Self(partner))
    }

    /// Views laid out as `[x0, x0', x1, x1', ...]`.
    pub fn adjacent(pairs: usize) -> Self {
        Self((0..2 * pairs).map(|i| i ^ 1).collect())
    }

    pub fn partner(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Numerically stable log-sum-exp over an iterator of logits.
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}
