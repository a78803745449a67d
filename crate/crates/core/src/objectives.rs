//! Contrastive, variety and fidelity losses. Every loss returns its value
//! together with gradients w.r.t. its representation inputs.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss value and gradients w.r.t. the two representation matrices.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub value: f64,
    pub d_first: Array2<f64>,
    pub d_second: Array2<f64>,
}

/// `sim(a_i, b_j) = a_i . b_j` for all pairs.
pub fn similarity(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    a.dot(&b.t())
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<usize> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("representation shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() < 2 {
        return Err(Error::invalid(format!("batch of {} rows, need at least 2", a.nrows())));
    }
    Ok(a.nrows())
}

/// Row-wise InfoNCE over `S = a b^T` with positives on the diagonal.
/// `leave_one_out` drops the positive from the denominator and flips the
/// sign, giving the L1Out estimate instead of a loss.
fn info_nce(a: ArrayView2<f64>, b: ArrayView2<f64>, leave_one_out: bool) -> Result<PairLoss> {
    let n = check_pair(a, b)?;
    let s = similarity(a, b);
    let mut ds = Array2::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        let row = s.row(i);
        let keep = |j: usize| !(leave_one_out && j == i);
        let m = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&j| keep(j)).map(|j| (row[j] - m).exp()).sum();
        let lse = m + denom.ln();
        let sign = if leave_one_out { 1.0 } else { -1.0 };
        // term_i = sign * (S_ii - lse_i)
        total += sign * (row[i] - lse);
        for j in (0..n).filter(|&j| keep(j)) {
            ds[[i, j]] -= sign * (row[j] - m).exp() / denom;
        }
        ds[[i, i]] += sign;
    }
    let inv = 1.0 / n as f64;
    ds.mapv_inplace(|x| x * inv);
    Ok(PairLoss { value: total * inv, d_first: ds.dot(&b), d_second: ds.t().dot(&a) })
}

/// Instance-level InfoNCE; the denominator includes the positive pair.
/// Gradients are w.r.t. `(z_x, z_v)`.
pub fn global_contrastive(z_x: ArrayView2<f64>, z_v: ArrayView2<f64>) -> Result<PairLoss> {
    info_nce(z_x, z_v, false)
}

/// Leave-one-out mutual information estimate between originals and views.
pub fn l1out_variety(z_x: ArrayView2<f64>, z_v: ArrayView2<f64>) -> Result<PairLoss> {
    info_nce(z_x, z_v, true)
}

/// Pseudo-label fidelity: each view is classified among the batch's source
/// instances by similarity logits. Gradients are w.r.t. `(z_v, z_x)`.
pub fn fidelity_ce_pseudolabel(z_v: ArrayView2<f64>, z_x: ArrayView2<f64>) -> Result<PairLoss> {
    info_nce(z_v, z_x, false)
}

#[derive(Debug, Clone)]
pub struct LocalLoss {
    pub value: f64,
    /// Gradient w.r.t. the stacked subsequence representations.
    pub grad: Array2<f64>,
    pub instances_used: usize,
    pub instances_skipped: usize,
}

/// Subsequence-level contrast within each instance. `z` stacks the windows
/// of all instances; `per_instance[k]` windows of instance `k` are
/// consecutive. The positive of window `s` is `s + 1` (or `s - 1` for the
/// last one); negatives are windows more than one step away.
pub fn local_contrastive(z: ArrayView2<f64>, per_instance: &[usize]) -> Result<LocalLoss> {
    let total: usize = per_instance.iter().sum();
    if total != z.nrows() {
        return Err(Error::Shape(format!("{} windows declared, {} rows given", total, z.nrows())));
    }
    let mut grad = Array2::zeros(z.raw_dim());
    let mut sum = 0.0;
    let mut used = 0;
    let mut offset = 0;
    for &n in per_instance {
        let block = z.slice(ndarray::s![offset..offset + n, ..]);
        if n >= 2 {
            used += 1;
            let s = similarity(block, block);
            let mut ds = Array2::<f64>::zeros((n, n));
            let mut inst = 0.0;
            for i in 0..n {
                let p = if i + 1 < n { i + 1 } else { i - 1 };
                let cands: Vec<usize> = std::iter::once(p).chain((0..n).filter(|&j| j.abs_diff(i) > 1)).collect();
                let m = cands.iter().map(|&j| s[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = cands.iter().map(|&j| (s[[i, j]] - m).exp()).sum();
                inst += m + denom.ln() - s[[i, p]];
                for &j in &cands {
                    ds[[i, j]] += (s[[i, j]] - m).exp() / denom;
                }
                ds[[i, p]] -= 1.0;
            }
            sum += inst / n as f64;
            ds.mapv_inplace(|x| x / n as f64);
            // S = Z Z^T, so dZ = (dS + dS^T) Z.
            let sym = &ds + &ds.t();
            grad.slice_mut(ndarray::s![offset..offset + n, ..]).assign(&sym.dot(&block));
        }
        offset += n;
    }
    if used == 0 {
        return Ok(LocalLoss { value: 0.0, grad, instances_used: 0, instances_skipped: per_instance.len() });
    }
    grad.mapv_inplace(|x| x / used as f64);
    Ok(LocalLoss { value: sum / used as f64, grad, instances_used: used, instances_skipped: per_instance.len() - used })
}

pub fn total_contrastive(l_g: f64, l_c: f64, alpha: f64) -> f64 {
    l_g + alpha * l_c
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn fidelity_ce_supervised(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), b)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} outside 0..{c}")));
    }
    let mut grad = Array2::zeros((b, c));
    let mut total = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        total += m + denom.ln() - row[labels[i]];
        for j in 0..c {
            grad[[i, j]] = (row[j] - m).exp() / denom / b as f64;
        }
        grad[[i, labels[i]]] -= 1.0 / b as f64;
    }
    Ok((total / b as f64, grad))
}

pub fn criteria(l1out: f64, ce: f64, beta: f64) -> f64 {
    l1out + beta * ce
}

/// Row-wise L2 normalisation and its backward pass.
pub fn normalize_rows(z: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let norms: Vec<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    let mut out = z.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
        row.mapv_inplace(|x| x / n);
    }
    (out, norms)
}

pub fn normalize_rows_backward(normalized: ArrayView2<f64>, norms: &[f64], d_out: ArrayView2<f64>) -> Array2<f64> {
    let mut dz = d_out.to_owned();
    for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
        let u = normalized.row(i);
        let proj = u.dot(&d_out.row(i));
        for (j, g) in row.iter_mut().enumerate() {
            *g = (*g - proj * u[j]) / norms[i];
        }
    }
    dz
}

/// Scalars tracked per optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_g: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub l1out: f64,
    pub ce: f64,
    pub criteria: f64,
}

impl LossReport {
    pub fn new(l_g: f64, l_c: f64, alpha: f64, l1out: f64, ce: f64, beta: f64) -> Self {
        Self { l_g, l_c, l_total: total_contrastive(l_g, l_c, alpha), l1out, ce, criteria: criteria(l1out, ce, beta) }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_g, self.l_c, self.l_total, self.l1out, self.ce, self.criteria].iter().all(|x| x.is_finite())
    }
}
