//! Image-level contrastive loss over an augmented batch.
//!
//! For `2b` unit embeddings `z` with pairing `j`:
//!
//! ```text
//! L = -(1/2b) * sum_i log( exp(z_i . z_j(i) / tau) / sum_{k != i} exp(z_i . z_k / tau) )
//! ```
//!
//! The temperature divides the dot product inside both exponentials.

use crate::error::{Error, Result};

use super::{log_sum_exp, normalize, normalize_backward, PairIndex, Temperature, UNIT_NORM_TOL};

pub fn global_contrastive_loss(z: &[Vec<f64>], pairing: &PairIndex, tau: Temperature) -> Result<f64> {
    evaluate(z, pairing, tau, false).map(|(v, _)| v)
}

/// Loss value and gradient with respect to each unit embedding.
pub fn global_contrastive_loss_and_grad(
    z: &[Vec<f64>],
    pairing: &PairIndex,
    tau: Temperature,
) -> Result<(f64, Vec<Vec<f64>>)> {
    evaluate(z, pairing, tau, true)
}

/// Normalizes raw projections, evaluates the loss and returns the gradient
/// with respect to the raw (pre-normalization) projections.
pub fn global_loss_from_raw(
    raw: &[Vec<f64>],
    pairing: &PairIndex,
    tau: Temperature,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (unit, norms): (Vec<_>, Vec<_>) = raw.iter().map(|r| normalize(r)).unzip();
    let (value, grad) = evaluate(&unit, pairing, tau, true)?;
    let raw_grad = unit
        .iter()
        .zip(&norms)
        .zip(&grad)
        .map(|((u, &n), g)| normalize_backward(u, n, g))
        .collect();
    Ok((value, raw_grad))
}

fn evaluate(
    z: &[Vec<f64>],
    pairing: &PairIndex,
    tau: Temperature,
    want_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = z.len();
    if n % 2 != 0 {
        return Err(Error::invalid(format!("global loss needs an even batch, got {n}")));
    }
    if pairing.len() != n {
        return Err(Error::invalid(format!("pairing covers {} images, batch has {n}", pairing.len())));
    }
    let dim = z[0].len();
    for (i, zi) in z.iter().enumerate() {
        if zi.len() != dim {
            return Err(Error::Shape(format!("embedding {i} has length {}, expected {dim}", zi.len())));
        }
        let norm = zi.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!("embedding {i} has norm {norm}, expected 1")));
        }
    }
    let t = tau.value();
    let logits: Vec<Vec<f64>> = z
        .iter()
        .map(|zi| z.iter().map(|zk| dot(zi, zk) / t).collect())
        .collect();

    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    // dL/ds_ik where s_ik = z_i . z_k
    let mut ds = vec![vec![0.0; n]; n];
    for i in 0..n {
        let j = pairing.partner(i);
        let row = &logits[i];
        let others = (0..n).filter(|&k| k != i).map(|k| row[k]);
        let lse = log_sum_exp(others);
        value -= scale * (row[j] - lse);
        if want_grad {
            for k in (0..n).filter(|&k| k != i) {
                let p = (row[k] - lse).exp();
                ds[i][k] += scale * p / t;
            }
            ds[i][j] -= scale / t;
        }
    }

    let mut grad = vec![vec![0.0; dim]; if want_grad { n } else { 0 }];
    if want_grad {
        for i in 0..n {
            for k in 0..n {
                let w = ds[i][k];
                if w == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    grad[i][d] += w * z[k][d];
                    grad[k][d] += w * z[i][d];
                }
            }
        }
    }
    Ok((value, grad))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
