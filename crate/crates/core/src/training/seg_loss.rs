//! Fine-tuning objective: pixel-mean cross-entropy plus soft Dice over the
//! foreground classes, equally weighted, pooled over the whole batch.

use crate::model::Fmap;

/// Additive smoothing of the soft Dice ratio.
const DICE_SMOOTH: f64 = 1.0;

fn softmax_pixels(logits: &Fmap) -> Vec<f64> {
    let hw = logits.hw();
    let k = logits.c;
    let mut p = vec![0.0; k * hw];
    for i in 0..hw {
        let max = (0..k).map(|c| logits.data[c * hw + i]).fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut total = 0.0;
        for c in 0..k {
            let e = (logits.data[c * hw + i] as f64 - max).exp();
            p[c * hw + i] = e;
            total += e;
        }
        for c in 0..k {
            p[c * hw + i] /= total;
        }
    }
    p
}

/// Returns the loss and the gradient with respect to each logit map.
/// `labels[b]` is the row-major mask of image `b`.
pub fn segmentation_loss(logits: &[Fmap], labels: &[&[i32]]) -> (f64, Vec<Fmap>) {
    let k = logits[0].c;
    let probs: Vec<Vec<f64>> = logits.iter().map(softmax_pixels).collect();
    let total_pixels: usize = logits.iter().map(Fmap::hw).sum();

    let mut ce = 0.0;
    // soft Dice statistics per class: sum p*t, sum p, sum t
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut tsum = vec![0.0; k];
    for (p, lab) in probs.iter().zip(labels) {
        let hw = lab.len();
        for (i, &t) in lab.iter().enumerate() {
            let t = t as usize;
            ce -= p[t * hw + i].max(1e-300).ln();
            inter[t] += p[t * hw + i];
            tsum[t] += 1.0;
            for c in 0..k {
                psum[c] += p[c * hw + i];
            }
        }
    }
    ce /= total_pixels as f64;
    let fg = (k - 1) as f64;
    let mut dice_mean = 0.0;
    // dL/dp_c = coef_c * t - shift_c for the Dice part
    let mut coef = vec![0.0; k];
    let mut shift = vec![0.0; k];
    for c in 1..k {
        let num = 2.0 * inter[c] + DICE_SMOOTH;
        let den = psum[c] + tsum[c] + DICE_SMOOTH;
        dice_mean += num / den;
        coef[c] = -2.0 / (den * fg);
        shift[c] = -num / (den * den * fg);
    }
    dice_mean /= fg;
    let loss = ce + (1.0 - dice_mean);

    let grads = probs
        .iter()
        .zip(labels)
        .zip(logits)
        .map(|((p, lab), l)| {
            let hw = lab.len();
            let mut g = Fmap::zeros(k, l.h, l.w);
            let mut dp = vec![0.0; k];
            for (i, &t) in lab.iter().enumerate() {
                let t = t as usize;
                for c in 0..k {
                    dp[c] = -shift[c] + if c == t { coef[c] } else { 0.0 };
                }
                let dot: f64 = (0..k).map(|c| p[c * hw + i] * dp[c]).sum();
                for c in 0..k {
                    let pc = p[c * hw + i];
                    let ce_grad = (pc - if c == t { 1.0 } else { 0.0 }) / total_pixels as f64;
                    g.data[c * hw + i] = (ce_grad + pc * (dp[c] - dot)) as f32;
                }
            }
            g
        })
        .collect();
    (loss, grads)
}
