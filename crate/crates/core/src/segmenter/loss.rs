//! Compound soft-Dice + cross-entropy segmentation loss with analytic
//! gradients w.r.t. the logits.

use crate::error::{Error, Result};
use crate::losses::LossValue;
use ndarray::{Array2, ArrayD};
use std::collections::BTreeMap;

const SMOOTH: f64 = 1e-5;

/// `logits`: (classes, spatial...); `labels`: (spatial...) with values in
/// `0..classes`. Value = (1 - mean per-foreground-class soft Dice) + mean
/// cross-entropy; gradient under key "logits".
pub fn dice_ce_loss(logits: &ArrayD<f64>, labels: &ArrayD<u8>) -> Result<LossValue> {
    let c = logits.shape()[0];
    if c < 2 {
        return Err(Error::ShapeMismatch(format!("need >= 2 classes, got {c}")));
    }
    if logits.shape()[1..] != *labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits spatial {:?} vs labels {:?}",
            &logits.shape()[1..],
            labels.shape()
        )));
    }
    let n: usize = labels.len();
    let flat_logits = logits.view().into_shape_with_order((c, n)).unwrap();
    let flat_labels = labels.view().into_shape_with_order(n).unwrap();
    if let Some(&bad) = flat_labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::ShapeMismatch(format!(
            "label {bad} outside 0..{c}"
        )));
    }

    // Per-voxel softmax with max subtraction.
    let mut probs = Array2::<f64>::zeros((c, n));
    for v in 0..n {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(flat_logits[[k, v]]);
        }
        let mut z = 0.0;
        for k in 0..c {
            let e = (flat_logits[[k, v]] - m).exp();
            probs[[k, v]] = e;
            z += e;
        }
        for k in 0..c {
            probs[[k, v]] /= z;
        }
    }

    // Cross-entropy term.
    let nf = n as f64;
    let mut ce = 0.0;
    for v in 0..n {
        ce -= probs[[flat_labels[v] as usize, v]].max(1e-300).ln();
    }
    ce /= nf;

    // Soft Dice per foreground class.
    let n_fg = (c - 1) as f64;
    let mut dice_sum = 0.0;
    let mut num = vec![0.0; c];
    let mut den = vec![0.0; c];
    for k in 1..c {
        let mut inter = 0.0;
        let mut p_sum = 0.0;
        let mut g_sum = 0.0;
        for v in 0..n {
            let g = (flat_labels[v] as usize == k) as u8 as f64;
            inter += probs[[k, v]] * g;
            p_sum += probs[[k, v]];
            g_sum += g;
        }
        num[k] = 2.0 * inter + SMOOTH;
        den[k] = p_sum + g_sum + SMOOTH;
        dice_sum += num[k] / den[k];
    }
    let dice_term = 1.0 - dice_sum / n_fg;
    let value = dice_term + ce;

    // dL/dp for both terms, then through the softmax Jacobian.
    // CE is taken directly on logits: dCE/dlogit_k = (p_k - onehot_k)/n.
    let mut dlogits = ArrayD::<f64>::zeros(logits.raw_dim());
    {
        let mut dl = dlogits.view_mut().into_shape_with_order((c, n)).unwrap();
        // dDice/dp_k(v) = -(1/n_fg) * (2 g - num/den) / den
        //              = -(1/n_fg) * (2 g * den - num) / den^2.
        for v in 0..n {
            let label = flat_labels[v] as usize;
            let mut dp = vec![0.0; c];
            for k in 1..c {
                let g = (label == k) as u8 as f64;
                dp[k] = -(1.0 / n_fg) * (2.0 * g * den[k] - num[k]) / (den[k] * den[k]);
            }
            // softmax backward: dlogit_j = p_j * (dp_j - sum_k dp_k p_k)
            let mut dot = 0.0;
            for k in 0..c {
                dot += dp[k] * probs[[k, v]];
            }
            for j in 0..c {
                let soft = probs[[j, v]] * (dp[j] - dot);
                let ce_g = (probs[[j, v]] - ((label == j) as u8 as f64)) / nf;
                dl[[j, v]] = soft + ce_g;
            }
        }
    }

    let mut grads = BTreeMap::new();
    grads.insert("logits".to_string(), dlogits);
    Ok(LossValue { value, grads })
}
