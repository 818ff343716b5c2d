//! Query-selected attention: build a global attention matrix from source
//! features, rank its rows by entropy, keep the lowest-entropy (most
//! domain-relevant) queries, and route both source and translated features
//! through those rows to form the patch sets of the contrastive loss.
//!
//! The attention is computed once, from source features, and the same
//! selected rows are applied to both domains. Selection is discrete and is
//! treated as a constant in the backward pass; the routing weights
//! themselves are differentiated (see [`nce_loss_with_grads`]).
//!
//! Memory note: the attention matrix is `HW x HW`; feature maps up to
//! 32x32 (HW = 1024) are the supported range at desk scale.

use crate::error::{Error, Result};
use crate::losses::{patchnce_loss, PatchSet};
use crate::rng::SeedStream;
use ndarray::{Array1, Array2, Array3};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Convolutional features at one encoder layer, `(C, H, W)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub layer_id: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, layer_id: usize) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeTooSmall(format!("feature map {:?}", (c, h, w))));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("feature map".into()));
        }
        Ok(FeatureMap { data, layer_id })
    }

    pub fn hw(&self) -> usize {
        let (_, h, w) = self.data.dim();
        h * w
    }

    /// Spatial positions as rows: `(HW, C)`.
    pub fn flatten_positions(&self) -> Array2<f64> {
        let (c, h, w) = self.data.dim();
        let mut out = Array2::zeros((h * w, c));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[y * w + x, ch]] = self.data[[ch, y, x]];
                }
            }
        }
        out
    }
}

/// Row-stochastic attention over spatial positions, `(HW, HW)`.
#[derive(Debug, Clone)]
pub struct AttentionMatrix {
    pub data: Array2<f64>,
}

impl AttentionMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "attention must be square, got {:?}",
                data.dim()
            )));
        }
        for (i, row) in data.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if !(v >= 0.0) {
                    return Err(Error::NonFiniteInput(format!(
                        "attention entry {v} in row {i}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::NonFiniteInput(format!(
                    "attention row {i} sums to {sum}"
                )));
            }
        }
        Ok(AttentionMatrix { data })
    }

    pub fn hw(&self) -> usize {
        self.data.nrows()
    }
}

/// Per-row Shannon entropy of an attention matrix, natural log.
#[derive(Debug, Clone)]
pub struct EntropyVector {
    pub data: Array1<f64>,
}

/// The k lowest-entropy queries and their attention rows.
#[derive(Debug, Clone)]
pub struct QuerySelection {
    /// Selected positions, sorted by (entropy ascending, index ascending).
    pub indices: Vec<usize>,
    /// The selected rows of the attention matrix, in selection order: `(k, HW)`.
    pub reduced_attention: Array2<f64>,
}

/// Numerically stable softmax along rows, in place.
pub(crate) fn rowsoftmax(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    logits
}

/// Global attention over all spatial positions: row-softmax of the
/// dot-product similarity between the flattened feature vectors.
pub fn global_attention(feat: &FeatureMap) -> Result<AttentionMatrix> {
    if !feat.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput("feature map".into()));
    }
    let x = feat.flatten_positions();
    let sims = x.dot(&x.t());
    AttentionMatrix::new(rowsoftmax(sims))
}

/// Row entropies `H(i) = -sum_j A(i,j) ln A(i,j)` with `0 ln 0 := 0`.
pub fn row_entropy(a: &AttentionMatrix) -> EntropyVector {
    let data = a
        .data
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum()
        })
        .collect();
    EntropyVector {
        data: Array1::from_vec(data),
    }
}

#[derive(PartialEq)]
struct HeapKey(f64, usize);

impl Eq for HeapKey {}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> Ordering {
        // Total order on (entropy, index); entropies are finite here.
        self.0
            .partial_cmp(&other.0)
            .unwrap()
            .then(self.1.cmp(&other.1))
    }
}

/// Pick the `k` rows with the smallest entropy, ties broken by smaller
/// index, via a bounded max-heap (the test suite checks this against a
/// full-sort oracle).
pub fn select_queries(a: &AttentionMatrix, h: &EntropyVector, k: usize) -> Result<QuerySelection> {
    let hw = a.hw();
    if k == 0 || k > hw {
        return Err(Error::KOutOfRange { k, hw });
    }
    if h.data.len() != hw {
        return Err(Error::ShapeMismatch(format!(
            "entropy length {} vs HW {hw}",
            h.data.len()
        )));
    }
    let mut heap: BinaryHeap<HeapKey> = BinaryHeap::with_capacity(k + 1);
    for (i, &e) in h.data.iter().enumerate() {
        heap.push(HeapKey(e, i));
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut picked: Vec<(f64, usize)> = heap.into_iter().map(|HeapKey(e, i)| (e, i)).collect();
    picked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let indices: Vec<usize> = picked.iter().map(|&(_, i)| i).collect();
    let mut reduced = Array2::zeros((k, hw));
    for (row, &idx) in indices.iter().enumerate() {
        reduced.row_mut(row).assign(&a.data.row(idx));
    }
    Ok(QuerySelection {
        indices,
        reduced_attention: reduced,
    })
}

/// Deterministic negative draws: for each selection slot `i`, `n_neg`
/// distinct other slots sampled from the stream seeded with `seed`.
fn negative_draws(k: usize, n_neg: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = SeedStream::new(seed);
    (0..k)
        .map(|i| {
            let pool: Vec<usize> = (0..k).filter(|&j| j != i).collect();
            rng.sample_distinct(&pool, n_neg)
        })
        .collect()
}

fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Route both feature maps through the selected attention rows and build one
/// patch set per selected query: the anchor comes from the translated
/// features, the positive and the negatives from the source features at the
/// same and at other selected positions. All vectors are L2-normalized.
pub fn build_patch_sets(
    feat_src: &FeatureMap,
    feat_trans: &FeatureMap,
    sel: &QuerySelection,
    tau: f64,
    n_neg: usize,
    rng_seed: u64,
) -> Result<Vec<PatchSet>> {
    if feat_src.data.dim() != feat_trans.data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "source {:?} vs translated {:?}",
            feat_src.data.dim(),
            feat_trans.data.dim()
        )));
    }
    let k = sel.indices.len();
    if n_neg == 0 || n_neg > k.saturating_sub(1) {
        return Err(Error::TooFewNegatives {
            requested: n_neg,
            available: k.saturating_sub(1),
        });
    }
    // The same source-derived rows route both domains.
    let attended_src = normalize_rows(&sel.reduced_attention.dot(&feat_src.flatten_positions()));
    let attended_trans =
        normalize_rows(&sel.reduced_attention.dot(&feat_trans.flatten_positions()));
    let draws = negative_draws(k, n_neg, rng_seed);
    let d = attended_src.ncols();
    let mut sets = Vec::with_capacity(k);
    for i in 0..k {
        let mut k_negs = Array2::zeros((n_neg, d));
        for (slot, &j) in draws[i].iter().enumerate() {
            k_negs.row_mut(slot).assign(&attended_src.row(j));
        }
        sets.push(PatchSet {
            q: attended_trans.row(i).to_owned(),
            k_pos: attended_src.row(i).to_owned(),
            k_negs,
            tau,
        });
    }
    Ok(sets)
}

/// Mean contrastive loss over the selected queries, with gradients w.r.t.
/// both feature maps. The forward pass is exactly
/// `global_attention -> row_entropy -> select_queries -> build_patch_sets ->
/// mean patchnce`; the backward pass differentiates through the L2
/// normalization, the attention routing, the row softmax, and the similarity
/// matrix, holding the discrete selection and negative draws fixed.
pub struct NceGrads {
    pub value: f64,
    pub d_feat_src: Array3<f64>,
    pub d_feat_trans: Array3<f64>,
}

pub fn nce_loss_with_grads(
    feat_src: &FeatureMap,
    feat_trans: &FeatureMap,
    k: usize,
    tau: f64,
    n_neg: usize,
    rng_seed: u64,
) -> Result<NceGrads> {
    let a = global_attention(feat_src)?;
    let h = row_entropy(&a);
    let sel = select_queries(&a, &h, k)?;
    let sets = build_patch_sets(feat_src, feat_trans, &sel, tau, n_neg, rng_seed)?;

    let x_s = feat_src.flatten_positions(); // (HW, C)
    let x_t = feat_trans.flatten_positions();
    let att_s_raw = sel.reduced_attention.dot(&x_s); // (k, C), pre-normalization
    let att_t_raw = sel.reduced_attention.dot(&x_t);

    let kk = sel.indices.len();
    let c = x_s.ncols();
    let hw = x_s.nrows();

    let mut value = 0.0;
    let mut d_unit_s = Array2::<f64>::zeros((kk, c));
    let mut d_unit_t = Array2::<f64>::zeros((kk, c));
    let draws = negative_draws(kk, n_neg, rng_seed);
    let scale = 1.0 / kk as f64;
    for (i, ps) in sets.iter().enumerate() {
        let lv = patchnce_loss(ps)?;
        value += lv.value * scale;
        {
            let g = lv.grads["q"].view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut row = d_unit_t.row_mut(i);
            row.scaled_add(scale, &g);
        }
        {
            let g = lv.grads["k_pos"].view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut row = d_unit_s.row_mut(i);
            row.scaled_add(scale, &g);
        }
        for (slot, &j) in draws[i].iter().enumerate() {
            let g = lv.grads[&format!("k_neg_{slot}")]
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let mut row = d_unit_s.row_mut(j);
            row.scaled_add(scale, &g);
        }
    }

    // Backward through row-wise L2 normalization: da = (du - u (u.du)) / r.
    let norm_backward = |raw: &Array2<f64>, d_unit: &Array2<f64>| -> Array2<f64> {
        let mut d_raw = Array2::<f64>::zeros(raw.raw_dim());
        for i in 0..raw.nrows() {
            let a = raw.row(i);
            let norm = a.dot(&a).sqrt();
            let du = d_unit.row(i);
            if norm > 1e-12 {
                let u = a.mapv(|v| v / norm);
                let proj = u.dot(&du);
                let mut row = d_raw.row_mut(i);
                for j in 0..raw.ncols() {
                    row[j] = (du[j] - u[j] * proj) / norm;
                }
            } else {
                let mut row = d_raw.row_mut(i);
                row.assign(&du.mapv(|v| v / 1e-12));
            }
        }
        d_raw
    };
    let d_att_s = norm_backward(&att_s_raw, &d_unit_s);
    let d_att_t = norm_backward(&att_t_raw, &d_unit_t);

    // attended = A_sel . X  =>  dX += A_sel^T dAtt, dA_sel = dAtt . X^T.
    let mut d_x_s = sel.reduced_attention.t().dot(&d_att_s);
    let d_x_t = sel.reduced_attention.t().dot(&d_att_t);
    let d_a_sel = d_att_s.dot(&x_s.t()) + d_att_t.dot(&x_t.t());

    // Scatter the selected rows back, then softmax backward per row:
    // dS_ij = A_ij (dA_ij - sum_l dA_il A_il).
    let mut d_sims = Array2::<f64>::zeros((hw, hw));
    for (row, &idx) in sel.indices.iter().enumerate() {
        let a_row = a.data.row(idx);
        let da_row = d_a_sel.row(row);
        let dot = da_row.dot(&a_row);
        let mut out = d_sims.row_mut(idx);
        for j in 0..hw {
            out[j] = a_row[j] * (da_row[j] - dot);
        }
    }

    // S = X_s X_s^T  =>  dX_s += dS X_s + dS^T X_s.
    d_x_s += &d_sims.dot(&x_s);
    d_x_s += &d_sims.t().dot(&x_s);

    let (cc, hh, ww) = feat_src.data.dim();
    let unflatten = |m: &Array2<f64>| -> Array3<f64> {
        let mut out = Array3::zeros((cc, hh, ww));
        for ch in 0..cc {
            for y in 0..hh {
                for x in 0..ww {
                    out[[ch, y, x]] = m[[y * ww + x, ch]];
                }
            }
        }
        out
    };

    Ok(NceGrads {
        value,
        d_feat_src: unflatten(&d_x_s),
        d_feat_trans: unflatten(&d_x_t),
    })
}
