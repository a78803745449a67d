//! Frozen-representation protocols: ridge forecasting, RBF-SVM
//! classification, and result tables.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, SplitSeries, TimeSeries};
use crate::encoder::{Encoder, Pooling};
use crate::error::{Error, Result};

pub const RIDGE_GRID: [f64; 5] = [0.1, 1.0, 10.0, 100.0, 1000.0];
/// Stand-in for an unbounded SVM penalty.
pub const C_INFINITY: f64 = 1e8;

pub fn svm_c_grid() -> Vec<f64> {
    (-4..=4).map(|i| 10f64.powi(i)).chain([C_INFINITY]).collect()
}

pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    (&pred - &target).mapv(|x| x * x).mean().unwrap_or(f64::NAN)
}

pub fn mae(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    (&pred - &target).mapv(f64::abs).mean().unwrap_or(f64::NAN)
}

/// Ridge regression with intercept, solved for a whole penalty grid from one
/// eigendecomposition of the centred Gram matrix.
#[derive(Debug, Clone)]
pub struct RidgePath {
    eigvecs: DMatrix<f64>,
    eigvals: Vec<f64>,
    /// `Q^T Z_c^T Y_c`.
    proj: DMatrix<f64>,
    z_mean: Vec<f64>,
    y_mean: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RidgeModel {
    pub weights: Array2<f64>,
    pub intercept: Vec<f64>,
    pub lambda: f64,
}

impl RidgeModel {
    pub fn predict(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let mut out = z.dot(&self.weights);
        for mut row in out.rows_mut() {
            row.iter_mut().zip(&self.intercept).for_each(|(v, b)| *v += b);
        }
        out
    }
}

fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

impl RidgePath {
    pub fn new(z: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Self> {
        if z.nrows() != y.nrows() || z.nrows() == 0 {
            return Err(Error::Shape(format!("ridge with {} inputs and {} targets", z.nrows(), y.nrows())));
        }
        let z_mean = z.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let y_mean = y.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let zc = to_dmatrix(z) - DMatrix::from_fn(z.nrows(), z.ncols(), |_, j| z_mean[j]);
        let yc = to_dmatrix(y) - DMatrix::from_fn(y.nrows(), y.ncols(), |_, j| y_mean[j]);
        let gram = zc.transpose() * &zc;
        let eig = SymmetricEigen::new(gram);
        let proj = eig.eigenvectors.transpose() * (zc.transpose() * yc);
        Ok(Self {
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect(),
            proj,
            z_mean,
            y_mean,
        })
    }

    pub fn model(&self, lambda: f64) -> RidgeModel {
        let mut scaled = self.proj.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row /= self.eigvals[i] + lambda;
        }
        let w = &self.eigvecs * scaled;
        let weights = Array2::from_shape_fn((w.nrows(), w.ncols()), |(i, j)| w[(i, j)]);
        let intercept = (0..w.ncols())
            .map(|j| self.y_mean[j] - (0..w.nrows()).map(|i| self.z_mean[i] * w[(i, j)]).sum::<f64>())
            .collect();
        RidgeModel { weights, intercept, lambda }
    }
}

/// How forecasting inputs are turned into feature vectors.
#[derive(Debug, Clone, Copy)]
pub enum Featurizer<'a> {
    Encoder { encoder: &'a Encoder, pooling: Pooling },
    /// The raw context window, flattened (linear-probe sanity mode).
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastTask {
    pub lx: usize,
    pub horizons: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Every `train_stride`-th training time is used to fit the readout.
    pub train_stride: usize,
    pub eval_stride: usize,
    /// Also report metrics after undoing the z-score.
    pub raw_scale: bool,
}

impl Default for ForecastTask {
    fn default() -> Self {
        Self {
            lx: 201,
            horizons: vec![24, 48, 168, 336, 720],
            lambdas: RIDGE_GRID.to_vec(),
            train_stride: 1,
            eval_stride: 1,
            raw_scale: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub dataset: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub lambda: f64,
    pub valid_mse: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub raw_mse: Option<f64>,
    pub raw_mae: Option<f64>,
}

/// Feature vectors of the causal windows `[t - lx + 1, t]` for every `t`;
/// timestamps before the series start are masked.
pub fn window_features(featurizer: Featurizer<'_>, series: &TimeSeries, times: &[usize], lx: usize) -> Result<Array2<f64>> {
    let f = series.n_features();
    let chunk = 256;
    let width = match featurizer {
        Featurizer::Encoder { encoder, .. } => encoder.output_dim(),
        Featurizer::Raw => lx * f,
    };
    let mut out = Array2::zeros((times.len(), width));
    for (c, ts) in times.chunks(chunk).enumerate() {
        let mut v = Array3::zeros((ts.len(), lx, f));
        let mut m = Array3::from_elem((ts.len(), lx, f), false);
        for (k, &t) in ts.iter().enumerate() {
            let start = (t + 1).saturating_sub(lx);
            let off = lx - (t + 1 - start);
            v.slice_mut(s![k, off.., ..]).assign(&series.values.slice(s![start..=t, ..]));
            m.slice_mut(s![k, off.., ..]).assign(&series.mask.slice(s![start..=t, ..]));
        }
        let feats = match featurizer {
            Featurizer::Encoder { encoder, pooling } => encoder.encode(&v, &m, pooling, chunk)?,
            Featurizer::Raw => v.into_shape_with_order((ts.len(), lx * f)).map_err(|e| Error::Shape(e.to_string()))?,
        };
        out.slice_mut(s![c * chunk..c * chunk + ts.len(), ..]).assign(&feats);
    }
    Ok(out)
}

fn targets(series: &TimeSeries, times: &[usize], h: usize) -> Array2<f64> {
    let f = series.n_features();
    Array2::from_shape_fn((times.len(), h * f), |(k, j)| series.values[[times[k] + 1 + j / f, j % f]])
}

fn split_times(r: std::ops::Range<usize>, h: usize, stride: usize) -> Vec<usize> {
    (r.start..r.end.saturating_sub(h)).step_by(stride.max(1)).collect()
}

/// Ridge readout from frozen features to the next `L_y` values, penalty
/// chosen on the validation range. `data` should already be normalised.
pub fn forecast_eval(featurizer: Featurizer<'_>, data: &SplitSeries, name: &str, task: &ForecastTask) -> Result<Vec<ForecastRow>> {
    if task.lx == 0 || task.horizons.iter().any(|&h| h == 0) {
        return Err(Error::invalid("context length and horizons must be positive"));
    }
    let max_h = *task.horizons.iter().max().ok_or_else(|| Error::invalid("no horizons"))?;
    for split in [Split::Train, Split::Valid, Split::Test] {
        if data.range(split).len() <= max_h {
            return Err(Error::invalid(format!("{split:?} range shorter than horizon {max_h}")));
        }
    }
    // Encode every needed time once; horizons reuse prefixes.
    let tr = split_times(data.train.clone(), 1, task.train_stride);
    let va = split_times(data.valid.clone(), 1, task.eval_stride);
    let te = split_times(data.test.clone(), 1, task.eval_stride);
    let z_tr = window_features(featurizer, &data.series, &tr, task.lx)?;
    let z_va = window_features(featurizer, &data.series, &va, task.lx)?;
    let z_te = window_features(featurizer, &data.series, &te, task.lx)?;
    let mut rows = Vec::new();
    for &h in &task.horizons {
        let keep = |times: &[usize], end: usize| times.iter().take_while(|&&t| t + h < end).count();
        let (ntr, nva, nte) = (keep(&tr, data.train.end), keep(&va, data.valid.end), keep(&te, data.test.end));
        let path = RidgePath::new(z_tr.slice(s![..ntr, ..]), targets(&data.series, &tr[..ntr], h).view())?;
        let y_va = targets(&data.series, &va[..nva], h);
        let (model, valid_mse) = task
            .lambdas
            .iter()
            .map(|&l| {
                let m = path.model(l);
                let e = mse(m.predict(z_va.slice(s![..nva, ..])).view(), y_va.view());
                (m, e)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| Error::invalid("empty ridge grid"))?;
        let y_te = targets(&data.series, &te[..nte], h);
        let pred = model.predict(z_te.slice(s![..nte, ..]));
        let (raw_mse, raw_mae) = match (&data.stats, task.raw_scale) {
            (Some(st), true) => {
                let f = data.series.n_features();
                let undo = |a: &Array2<f64>| {
                    Array2::from_shape_fn(a.dim(), |(i, j)| a[[i, j]] * st.std[j % f] + st.mean[j % f])
                };
                let (p, y) = (undo(&pred), undo(&y_te));
                (Some(mse(p.view(), y.view())), Some(mae(p.view(), y.view())))
            }
            _ => (None, None),
        };
        rows.push(ForecastRow {
            dataset: name.to_string(),
            horizon: h,
            mse: mse(pred.view(), y_te.view()),
            mae: mae(pred.view(), y_te.view()),
            lambda: model.lambda,
            valid_mse,
            n_train: ntr,
            n_test: nte,
            raw_mse,
            raw_mae,
        });
    }
    Ok(rows)
}

/// Binary soft-margin SVM on a precomputed kernel, solved by SMO with
/// second-order working-set selection.
#[derive(Debug, Clone)]
pub struct BinarySvm {
    pub coef: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
}

impl BinarySvm {
    /// `kernel` is the `n x n` Gram matrix, `y` in `{-1, +1}`.
    pub fn fit(kernel: ArrayView2<f64>, y: &[f64], c: f64, eps: f64, max_iter: usize) -> BinarySvm {
        const TAU: f64 = 1e-12;
        let n = y.len();
        let mut alpha = vec![0.0; n];
        let mut g = vec![-1.0; n];
        let q = |i: usize, j: usize| y[i] * y[j] * kernel[[i, j]];
        let mut iterations = 0;
        while iterations < max_iter {
            let mut gmax = f64::NEG_INFINITY;
            let mut sel_i = None;
            for t in 0..n {
                let up = if y[t] > 0.0 { alpha[t] < c } else { alpha[t] > 0.0 };
                if up && -y[t] * g[t] >= gmax {
                    gmax = -y[t] * g[t];
                    sel_i = Some(t);
                }
            }
            let Some(i) = sel_i else { break };
            let mut gmax2 = f64::NEG_INFINITY;
            let mut best = f64::INFINITY;
            let mut sel_j = None;
            for t in 0..n {
                let low = if y[t] > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c };
                if !low {
                    continue;
                }
                let yg = y[t] * g[t];
                gmax2 = gmax2.max(yg);
                let diff = gmax + yg;
                if diff > 0.0 {
                    let quad = kernel[[i, i]] + kernel[[t, t]] - 2.0 * kernel[[i, t]];
                    let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                    if obj <= best {
                        best = obj;
                        sel_j = Some(t);
                    }
                }
            }
            let Some(j) = sel_j.filter(|_| gmax + gmax2 >= eps) else { break };
            iterations += 1;
            let (ai, aj) = (alpha[i], alpha[j]);
            if y[i] != y[j] {
                let quad = (kernel[[i, i]] + kernel[[j, j]] - 2.0 * kernel[[i, j]]).max(TAU);
                let delta = (-g[i] - g[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let quad = (kernel[[i, i]] + kernel[[j, j]] - 2.0 * kernel[[i, j]]).max(TAU);
                let delta = (g[i] - g[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
            for k in 0..n {
                g[k] += q(i, k) * di + q(j, k) * dj;
            }
        }
        let (mut ub, mut lb, mut sum_free, mut n_free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for t in 0..n {
            let yg = y[t] * g[t];
            if alpha[t] >= c {
                if y[t] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if alpha[t] <= 0.0 {
                if y[t] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                n_free += 1;
                sum_free += yg;
            }
        }
        let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
        BinarySvm { coef: alpha.iter().zip(y).map(|(a, y)| a * y).collect(), rho, iterations }
    }

    /// Decision values for kernel rows `[m x n]` against the training set.
    pub fn decision(&self, kernel_rows: ArrayView2<f64>) -> Vec<f64> {
        kernel_rows.rows().into_iter().map(|r| r.iter().zip(&self.coef).map(|(k, c)| k * c).sum::<f64>() - self.rho).collect()
    }
}

pub fn rbf_kernel(a: ArrayView2<f64>, b: ArrayView2<f64>, gamma: f64) -> Array2<f64> {
    let na: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut k = a.dot(&b.t());
    for ((i, j), v) in k.indexed_iter_mut() {
        *v = (-gamma * (na[i] + nb[j] - 2.0 * *v).max(0.0)).exp();
    }
    k
}

/// `1 / (D * Var(X))` over all entries.
pub fn gamma_scale(x: ArrayView2<f64>) -> f64 {
    let var = x.var(0.0);
    if var > 0.0 {
        1.0 / (x.ncols() as f64 * var)
    } else {
        1.0
    }
}

/// One-vs-one RBF SVM.
#[derive(Debug, Clone)]
pub struct SvmClassifier {
    train: Array2<f64>,
    gamma: f64,
    classes: usize,
    machines: Vec<(usize, usize, Vec<usize>, BinarySvm)>,
}

impl SvmClassifier {
    pub fn fit(x: ArrayView2<f64>, labels: &[usize], c: f64) -> Result<Self> {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let present: Vec<usize> = (0..classes).filter(|k| labels.contains(k)).collect();
        if present.len() < 2 {
            return Err(Error::invalid("SVM training needs at least two classes"));
        }
        let gamma = gamma_scale(x);
        let kernel = rbf_kernel(x, x, gamma);
        let mut machines = Vec::new();
        for (ai, &a) in present.iter().enumerate() {
            for &b in &present[ai + 1..] {
                let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == a || labels[i] == b).collect();
                let sub = Array2::from_shape_fn((idx.len(), idx.len()), |(i, j)| kernel[[idx[i], idx[j]]]);
                let y: Vec<f64> = idx.iter().map(|&i| if labels[i] == a { 1.0 } else { -1.0 }).collect();
                let svm = BinarySvm::fit(sub.view(), &y, c, 1e-3, 10_000_000);
                machines.push((a, b, idx, svm));
            }
        }
        Ok(Self { train: x.to_owned(), gamma, classes, machines })
    }

    /// Majority vote; ties go to the lower class index.
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let k = rbf_kernel(x, self.train.view(), self.gamma);
        let mut votes = Array2::<usize>::zeros((x.nrows(), self.classes));
        for (a, b, idx, svm) in &self.machines {
            let rows = Array2::from_shape_fn((x.nrows(), idx.len()), |(i, j)| k[[i, idx[j]]]);
            for (i, d) in svm.decision(rows.view()).into_iter().enumerate() {
                votes[[i, if d > 0.0 { *a } else { *b }]] += 1;
            }
        }
        votes
            .rows()
            .into_iter()
            .map(|r| (0..self.classes).fold(0, |best, c| if r[c] > r[best] { c } else { best }))
            .collect()
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64
}

/// Stratified fold index per sample: each class is dealt round-robin.
fn stratified_folds(labels: &[usize], k: usize) -> Vec<usize> {
    let mut fold = vec![0; labels.len()];
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let c = seen.entry(y).or_default();
        fold[i] = *c % k;
        *c += 1;
    }
    fold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub dataset: String,
    pub accuracy: f64,
    pub c: f64,
    pub cv_accuracy: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

/// Picks `C` by stratified cross-validation (up to 5 folds, limited by the
/// smallest class), refits on all training data and scores the test set.
pub fn svm_protocol(
    z_train: ArrayView2<f64>,
    y_train: &[usize],
    z_test: ArrayView2<f64>,
    y_test: &[usize],
    name: &str,
) -> Result<ClassifyReport> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in y_train {
        *counts.entry(y).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::invalid("single-class training split"));
    }
    let k = counts.values().copied().min().unwrap_or(0).min(5);
    let (c, cv) = if k >= 2 {
        let folds = stratified_folds(y_train, k);
        let mut best = (C_INFINITY, f64::NEG_INFINITY);
        for c in svm_c_grid() {
            let mut acc = 0.0;
            for f in 0..k {
                let tr: Vec<usize> = (0..y_train.len()).filter(|&i| folds[i] != f).collect();
                let te: Vec<usize> = (0..y_train.len()).filter(|&i| folds[i] == f).collect();
                let ytr: Vec<usize> = tr.iter().map(|&i| y_train[i]).collect();
                let yte: Vec<usize> = te.iter().map(|&i| y_train[i]).collect();
                let m = SvmClassifier::fit(z_train.select(Axis(0), &tr).view(), &ytr, c)?;
                acc += accuracy(&m.predict(z_train.select(Axis(0), &te).view()), &yte) / k as f64;
            }
            if acc > best.1 {
                best = (c, acc);
            }
        }
        (best.0, Some(best.1))
    } else {
        (C_INFINITY, None)
    };
    let model = SvmClassifier::fit(z_train, y_train, c)?;
    Ok(ClassifyReport {
        dataset: name.to_string(),
        accuracy: accuracy(&model.predict(z_test), y_test),
        c,
        cv_accuracy: cv,
        n_train: y_train.len(),
        n_test: y_test.len(),
    })
}

/// Encodes the train and test splits of a labelled dataset and runs the SVM
/// protocol on the frozen representations.
pub fn classify_eval(encoder: &Encoder, dataset: &Dataset) -> Result<ClassifyReport> {
    let labels = dataset.labels.as_ref().ok_or_else(|| Error::invalid("classification needs labels"))?;
    let encode = |split: Split| -> Result<(Array2<f64>, Vec<usize>)> {
        let idx = dataset.indices(split);
        let b = crate::data::Batch::from_dataset(dataset, &idx, Some(dataset.max_len()))?;
        let z = encoder.encode(&b.values, &b.mask, encoder.config.pooling, 64)?;
        Ok((z, idx.iter().map(|&i| labels[i]).collect()))
    };
    let (ztr, ytr) = encode(Split::Train)?;
    let (zte, yte) = encode(Split::Test)?;
    if zte.nrows() == 0 {
        return Err(Error::invalid("empty test split"));
    }
    svm_protocol(ztr.view(), &ytr, zte.view(), &yte, &dataset.name)
}

/// One metric cell of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub method: String,
    pub dataset: String,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub average: Option<f64>,
    pub average_rank: f64,
    pub count: usize,
}

/// Per-method averages (missing cells excluded) and average ranks (ties
/// share the mean rank). With `missing_as_zero`, a missing cell ranks as a
/// value of 0; otherwise it is left out of that dataset's ranking.
pub fn summarize(cells: &[MetricCell], lower_is_better: bool, missing_as_zero: bool) -> Vec<MethodSummary> {
    let mut methods: Vec<String> = Vec::new();
    let mut datasets: Vec<String> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method.clone());
        }
        if !datasets.contains(&c.dataset) {
            datasets.push(c.dataset.clone());
        }
    }
    let lookup = |m: &str, d: &str| cells.iter().find(|c| c.method == m && c.dataset == d).and_then(|c| c.value);
    let mut rank_sum = vec![0.0; methods.len()];
    let mut rank_n = vec![0usize; methods.len()];
    for d in &datasets {
        let vals: Vec<(usize, f64)> = methods
            .iter()
            .enumerate()
            .filter_map(|(i, m)| lookup(m, d).or(missing_as_zero.then_some(0.0)).map(|v| (i, v)))
            .collect();
        for &(i, v) in &vals {
            let better = vals.iter().filter(|&&(_, w)| if lower_is_better { w < v } else { w > v }).count();
            let ties = vals.iter().filter(|&&(_, w)| w == v).count();
            rank_sum[i] += better as f64 + (ties as f64 + 1.0) / 2.0;
            rank_n[i] += 1;
        }
    }
    methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let present: Vec<f64> = datasets.iter().filter_map(|d| lookup(m, d)).collect();
            MethodSummary {
                method: m.clone(),
                average: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
                average_rank: if rank_n[i] > 0 { rank_sum[i] / rank_n[i] as f64 } else { f64::NAN },
                count: present.len(),
            }
        })
        .collect()
}

/// Plain-text table of forecasting rows: one line per (dataset, L_y).
pub fn render_forecast_table(rows: &[ForecastRow]) -> String {
    let mut out = String::from("dataset | L_y | MSE | MAE | lambda\n--- | --- | --- | --- | ---\n");
    for r in rows {
        out.push_str(&format!("{} | {} | {:.4} | {:.4} | {}\n", r.dataset, r.horizon, r.mse, r.mae, r.lambda));
    }
    out
}
