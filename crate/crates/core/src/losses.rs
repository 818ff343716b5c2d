//! Loss functions with analytic gradients: cycle-consistency, the patchwise
//! contrastive loss, and the least-squares adversarial objective. All values
//! and gradients are f64; every gradient is verified against central finite
//! differences in the test suite.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayD};
use std::collections::BTreeMap;

/// Anchor / positive / negatives with temperature, the unit of the
/// contrastive loss.
#[derive(Debug, Clone)]
pub struct PatchSet {
    /// Anchor feature from the translated image.
    pub q: Array1<f64>,
    /// Positive at the same location in the source image.
    pub k_pos: Array1<f64>,
    /// `(N-1) x D` negatives at other locations.
    pub k_negs: Array2<f64>,
    pub tau: f64,
}

impl PatchSet {
    pub fn validate(&self) -> Result<()> {
        let d = self.q.len();
        if self.k_pos.len() != d || self.k_negs.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "patch set dims: q {}, k+ {}, k- cols {}",
                d,
                self.k_pos.len(),
                self.k_negs.ncols()
            )));
        }
        if self.k_negs.nrows() == 0 {
            return Err(Error::TooFewNegatives {
                requested: 1,
                available: 0,
            });
        }
        if !(self.tau > 0.0) {
            return Err(Error::NonFiniteInput(format!("tau = {}", self.tau)));
        }
        let finite = self.q.iter().chain(self.k_pos.iter()).chain(self.k_negs.iter());
        if !finite.into_iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("patch set contains non-finite values".into()));
        }
        Ok(())
    }

    /// N of the contrastive loss: one positive plus the negatives.
    pub fn n(&self) -> usize {
        1 + self.k_negs.nrows()
    }
}

/// A scalar loss together with gradients keyed by input name.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grads: BTreeMap<String, ArrayD<f64>>,
}

/// Mean-L1 cycle-consistency loss over both reconstruction directions.
/// Gradients are provided w.r.t. the reconstructions `fg_xs` and `gf_xt`;
/// the subgradient of |.| at 0 is taken to be 0.
pub fn cycle_loss(
    x_s: &ArrayD<f64>,
    x_t: &ArrayD<f64>,
    fg_xs: &ArrayD<f64>,
    gf_xt: &ArrayD<f64>,
) -> Result<LossValue> {
    if fg_xs.shape() != x_s.shape() {
        return Err(Error::ShapeMismatch(format!(
            "F(G(x_s)) {:?} vs x_s {:?}",
            fg_xs.shape(),
            x_s.shape()
        )));
    }
    if gf_xt.shape() != x_t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "G(F(x_t)) {:?} vs x_t {:?}",
            gf_xt.shape(),
            x_t.shape()
        )));
    }
    let term = |recon: &ArrayD<f64>, orig: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
        let n = recon.len() as f64;
        let mut grad = recon.clone();
        let mut total = 0.0;
        ndarray::Zip::from(&mut grad).and(orig).for_each(|g, &o| {
            let d = *g - o;
            total += d.abs();
            *g = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        });
        (total / n, grad)
    };
    let (v1, g1) = term(fg_xs, x_s);
    let (v2, g2) = term(gf_xt, x_t);
    let mut grads = BTreeMap::new();
    grads.insert("fg_xs".to_string(), g1);
    grads.insert("gf_xt".to_string(), g2);
    Ok(LossValue {
        value: v1 + v2,
        grads,
    })
}

/// InfoNCE over one patch set:
/// `-log( exp(q.k+/tau) / (exp(q.k+/tau) + sum_i exp(q.k-_i/tau)) )`,
/// evaluated as `logsumexp(logits) - logit_pos` with max subtraction.
/// Gradients cover `q`, `k_pos`, and each negative (`k_neg_<i>`).
pub fn patchnce_loss(ps: &PatchSet) -> Result<LossValue> {
    ps.validate()?;
    let n_neg = ps.k_negs.nrows();
    let mut logits = Vec::with_capacity(1 + n_neg);
    logits.push(ps.q.dot(&ps.k_pos) / ps.tau);
    for i in 0..n_neg {
        logits.push(ps.q.dot(&ps.k_negs.row(i)) / ps.tau);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let lse = m + sum_exp.ln();
    let value = lse - logits[0];

    // d value / d logit_i = p_i - [i == 0]
    let probs: Vec<f64> = logits.iter().map(|&l| (l - m).exp() / sum_exp).collect();
    let mut dq = Array1::<f64>::zeros(ps.q.len());
    let mut grads = BTreeMap::new();
    {
        let c0 = (probs[0] - 1.0) / ps.tau;
        dq.scaled_add(c0, &ps.k_pos);
        grads.insert(
            "k_pos".to_string(),
            (&ps.q * c0).into_dyn(),
        );
        for i in 0..n_neg {
            let ci = probs[i + 1] / ps.tau;
            dq.scaled_add(ci, &ps.k_negs.row(i).to_owned());
            grads.insert(format!("k_neg_{i}"), (&ps.q * ci).into_dyn());
        }
    }
    grads.insert("q".to_string(), dq.into_dyn());
    Ok(LossValue { value, grads })
}

/// Least-squares adversarial loss: `mean((d_out - t)^2)` with t in {0, 1}.
pub fn adversarial_loss(d_out: &ArrayD<f64>, target_real: bool) -> Result<LossValue> {
    if !d_out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput("discriminator output".into()));
    }
    let t = if target_real { 1.0 } else { 0.0 };
    let n = d_out.len() as f64;
    let value = d_out.iter().map(|&v| (v - t) * (v - t)).sum::<f64>() / n;
    let grad = d_out.mapv(|v| 2.0 * (v - t) / n);
    let mut grads = BTreeMap::new();
    grads.insert("d_out".to_string(), grad);
    Ok(LossValue { value, grads })
}

/// Central-difference gradient of a scalar function, entry by entry:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn fd_gradient<F>(f: F, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    assert!(eps > 0.0);
    let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = x.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + eps;
        let hi = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let lo = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Max relative error between an analytic and a reference gradient, with an
/// absolute floor so near-zero entries do not blow up the ratio.
pub fn max_rel_err(analytic: &ArrayD<f64>, reference: &ArrayD<f64>) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(&a, &r)| (a - r).abs() / a.abs().max(r.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
