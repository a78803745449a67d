//! Core data types shared by every stage: series, labelled datasets, padded
//! batches, normalization statistics and train/valid/test splits.

use std::ops::Range;

use log::warn;
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// One multivariate series of shape `[T x F]` with an observation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
    pub id: String,
}

impl TimeSeries {
    /// Builds a series from raw values; non-finite entries become unobserved
    /// zeros.
    pub fn new(values: Array2<f64>, id: impl Into<String>) -> Result<Self> {
        let mask = values.mapv(f64::is_finite);
        let values = values.mapv(|v| if v.is_finite() { v } else { 0.0 });
        Self::with_mask(values, mask, id)
    }

    pub fn with_mask(values: Array2<f64>, mask: Array2<bool>, id: impl Into<String>) -> Result<Self> {
        let (t, f) = values.dim();
        if t == 0 || f == 0 {
            return Err(Error::Shape(format!("series must be at least 1x1, got {t}x{f}")));
        }
        if mask.dim() != values.dim() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match values {:?}",
                mask.dim(),
                values.dim()
            )));
        }
        if values.iter().zip(mask.iter()).any(|(v, &m)| m && !v.is_finite()) {
            return Err(Error::invalid("observed entries must be finite"));
        }
        Ok(Self { values, mask, id: id.into() })
    }

    pub fn univariate(values: &[f64], id: impl Into<String>) -> Result<Self> {
        let arr = Array2::from_shape_vec((values.len(), 1), values.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(arr, id)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    /// Pads with unobserved zero rows, or truncates from the end, to exactly
    /// `target` timestamps.
    pub fn pad_to_length(&self, target: usize) -> Result<TimeSeries> {
        if target == 0 {
            return Err(Error::invalid("pad target must be at least 1"));
        }
        let (t, f) = self.values.dim();
        if t == target {
            return Ok(self.clone());
        }
        let keep = t.min(target);
        let mut values = Array2::zeros((target, f));
        let mut mask = Array2::from_elem((target, f), false);
        values.slice_mut(s![..keep, ..]).assign(&self.values.slice(s![..keep, ..]));
        mask.slice_mut(s![..keep, ..]).assign(&self.mask.slice(s![..keep, ..]));
        Ok(TimeSeries { values, mask, id: self.id.clone() })
    }

    /// Contiguous time slice `[range.start, range.end)`.
    pub fn slice(&self, range: Range<usize>, id: impl Into<String>) -> Result<TimeSeries> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::invalid(format!(
                "slice {range:?} out of bounds for length {}",
                self.len()
            )));
        }
        TimeSeries::with_mask(
            self.values.slice(s![range.clone(), ..]).to_owned(),
            self.mask.slice(s![range, ..]).to_owned(),
            id,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// A collection of instances with optional class labels and split tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<TimeSeries>,
    pub labels: Option<Vec<usize>>,
    pub splits: Vec<Split>,
    pub num_classes: Option<usize>,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        instances: Vec<TimeSeries>,
        labels: Option<Vec<usize>>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if splits.len() != instances.len() {
            return Err(Error::Shape(format!(
                "{} split tags for {} instances",
                splits.len(),
                instances.len()
            )));
        }
        let f = instances.first().map(|s| s.n_features());
        if instances.iter().any(|s| Some(s.n_features()) != f) {
            return Err(Error::Shape("instances disagree on feature count".into()));
        }
        let num_classes = match &labels {
            Some(l) => {
                if l.len() != instances.len() {
                    return Err(Error::Shape(format!(
                        "{} labels for {} instances",
                        l.len(),
                        instances.len()
                    )));
                }
                Some(l.iter().copied().max().map_or(0, |m| m + 1))
            }
            None => None,
        };
        Ok(Self {
            name: name.into(),
            instances,
            labels,
            splits,
            num_classes,
            class_names: Vec::new(),
            warnings: Vec::new(),
        })
    }

    /// Overrides the class count; every present label must stay below it.
    pub fn with_num_classes(mut self, c: usize) -> Result<Self> {
        if let Some(l) = &self.labels {
            if let Some(&bad) = l.iter().find(|&&y| y >= c) {
                return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
            }
        }
        self.num_classes = Some(c);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.instances.first().map_or(0, |s| s.n_features())
    }

    pub fn max_len(&self) -> usize {
        self.instances.iter().map(TimeSeries::len).max().unwrap_or(0)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Instances carrying the given split tag, as a standalone dataset.
    pub fn subset(&self, split: Split) -> Dataset {
        self.select(&self.indices(split))
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            instances: idx.iter().map(|&i| self.instances[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Concatenates two datasets (e.g. TRAIN and TEST files of one archive).
    pub fn concat(mut self, other: Dataset) -> Result<Dataset> {
        if !self.is_empty() && !other.is_empty() && self.n_features() != other.n_features() {
            return Err(Error::Shape("cannot concatenate datasets with different F".into()));
        }
        self.labels = match (self.labels.take(), other.labels) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            (None, None) => None,
            _ => return Err(Error::invalid("cannot mix labelled and unlabelled datasets")),
        };
        self.instances.extend(other.instances);
        self.splits.extend(other.splits);
        self.num_classes = match (self.num_classes, other.num_classes) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        if self.class_names.is_empty() {
            self.class_names = other.class_names;
        }
        Ok(self)
    }
}

/// Per-feature z-score statistics fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose standard deviation was clamped to 1.
    pub clamped: Vec<usize>,
}

impl NormStats {
    pub fn apply(&self, ts: &TimeSeries) -> TimeSeries {
        let mut out = ts.clone();
        for ((t, f), v) in out.values.indexed_iter_mut() {
            *v = if ts.mask[[t, f]] { (*v - self.mean[f]) / self.std[f] } else { 0.0 };
        }
        out
    }

    pub fn inverse(&self, ts: &TimeSeries) -> TimeSeries {
        let mut out = ts.clone();
        for ((t, f), v) in out.values.indexed_iter_mut() {
            if ts.mask[[t, f]] {
                *v = *v * self.std[f] + self.mean[f];
            }
        }
        out
    }
}

/// Two-pass z-score fit over observed entries (mean, then population
/// variance). Zero-variance features get std 1.
pub fn fit_zscore<'a, I>(series: I, n_features: usize) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a TimeSeries> + Clone,
{
    let mut sum = vec![0.0; n_features];
    let mut count = vec![0usize; n_features];
    for ts in series.clone() {
        for (((_, f), &v), &m) in ts.values.indexed_iter().zip(ts.mask.iter()) {
            if m {
                sum[f] += v;
                count[f] += 1;
            }
        }
    }
    if count.iter().all(|&c| c == 0) {
        return Err(Error::invalid("no observed training values to fit normalization"));
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0; n_features];
    for ts in series {
        for (((_, f), &v), &m) in ts.values.indexed_iter().zip(ts.mask.iter()) {
            if m {
                let d = v - mean[f];
                sq[f] += d * d;
            }
        }
    }
    let mut std = vec![1.0; n_features];
    let mut clamped = Vec::new();
    for f in 0..n_features {
        let sd = if count[f] > 0 { (sq[f] / count[f] as f64).sqrt() } else { 0.0 };
        if sd < 1e-12 || !sd.is_finite() {
            clamped.push(f);
        } else {
            std[f] = sd;
        }
    }
    Ok(NormStats { mean, std, clamped })
}

/// Z-scores every instance with statistics fitted on the train split only.
/// Unobserved entries are imputed as 0 afterwards.
pub fn normalize_zscore(dataset: &Dataset) -> Result<(Dataset, NormStats)> {
    let train: Vec<&TimeSeries> = dataset.indices(Split::Train).into_iter().map(|i| &dataset.instances[i]).collect();
    if train.is_empty() {
        return Err(Error::invalid("normalization requires a non-empty train split"));
    }
    let stats = fit_zscore(train.iter().copied(), dataset.n_features())?;
    let mut out = dataset.clone();
    for ts in &mut out.instances {
        *ts = stats.apply(ts);
    }
    for &f in &stats.clamped {
        let msg = format!("feature {f} has zero variance on the train split; std clamped to 1");
        warn!("{}: {msg}", dataset.name);
        out.warnings.push(msg);
    }
    Ok((out, stats))
}

/// A padded mini-batch, `[B x T x F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub values: Array3<f64>,
    pub mask: Array3<bool>,
    pub labels: Option<Vec<usize>>,
    pub instance_ids: Vec<String>,
    /// Positions of the instances in the source dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    /// Stacks the selected instances, padding to the longest one (or to
    /// `target_len` when given).
    pub fn from_dataset(dataset: &Dataset, idx: &[usize], target_len: Option<usize>) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let t = target_len.unwrap_or_else(|| idx.iter().map(|&i| dataset.instances[i].len()).max().unwrap_or(1));
        let f = dataset.n_features();
        let b = idx.len();
        let mut values = Array3::zeros((b, t, f));
        let mut mask = Array3::from_elem((b, t, f), false);
        for (row, &i) in idx.iter().enumerate() {
            let ts = dataset.instances[i].pad_to_length(t)?;
            values.slice_mut(s![row, .., ..]).assign(&ts.values);
            mask.slice_mut(s![row, .., ..]).assign(&ts.mask);
        }
        Ok(Batch {
            values,
            mask,
            labels: dataset.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            instance_ids: idx.iter().map(|&i| dataset.instances[i].id.clone()).collect(),
            indices: idx.to_vec(),
        })
    }

    pub fn size(&self) -> usize {
        self.values.dim().0
    }

    pub fn len_t(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_features(&self) -> usize {
        self.values.dim().2
    }
}

/// Index plan for one epoch: every instance once, trailing batches of size
/// below 2 dropped.
pub fn batch_plan(n: usize, batch_size: usize, shuffle: bool, rng: RngStream) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size must be at least 2"));
    }
    if n < 2 {
        return Err(Error::InsufficientInstances(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng.rng());
    }
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn make_batches(dataset: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Batch>> {
    batch_plan(dataset.len(), batch_size, shuffle, RngStream::new(seed))?
        .iter()
        .map(|idx| Batch::from_dataset(dataset, idx, None))
        .collect()
}

/// How a long series is cut into chronological train/valid/test ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SplitSpec {
    Ratio { train: f64, valid: f64, test: f64 },
    Calendar { train_months: usize, valid_months: usize, test_months: usize, steps_per_month: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratio { train: 0.6, valid: 0.2, test: 0.2 }
    }
}

impl SplitSpec {
    /// 12/4/4 months of 30 days, for hourly ETT-style data.
    pub fn ett_hourly() -> Self {
        SplitSpec::Calendar { train_months: 12, valid_months: 4, test_months: 4, steps_per_month: 30 * 24 }
    }

    pub fn ett_minutely() -> Self {
        SplitSpec::Calendar { train_months: 12, valid_months: 4, test_months: 4, steps_per_month: 30 * 24 * 4 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SplitSpec::Ratio { train, valid, test } => {
                if [train, valid, test].iter().any(|&r| !(0.0..=1.0).contains(&r)) {
                    return Err(Error::invalid("split ratios must lie in [0, 1]"));
                }
                if (train + valid + test - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "split ratios must sum to 1, got {}",
                        train + valid + test
                    )));
                }
            }
            SplitSpec::Calendar { steps_per_month, .. } => {
                if steps_per_month == 0 {
                    return Err(Error::invalid("steps_per_month must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Resolves the spec against a series of length `n`.
    pub fn ranges(&self, n: usize) -> Result<[Range<usize>; 3]> {
        self.validate()?;
        let (a, b, c) = match *self {
            SplitSpec::Ratio { train, valid, .. } => {
                let a = (train * n as f64).floor() as usize;
                let b = ((train + valid) * n as f64).floor() as usize;
                (a, b, n)
            }
            SplitSpec::Calendar { train_months, valid_months, test_months, steps_per_month } => {
                let a = train_months * steps_per_month;
                let b = a + valid_months * steps_per_month;
                let c = b + test_months * steps_per_month;
                if c > n {
                    return Err(Error::invalid(format!("calendar split needs {c} steps, series has {n}")));
                }
                (a, b, c)
            }
        };
        if a == 0 || b <= a || c <= b {
            return Err(Error::invalid(format!("degenerate split [0,{a}) [{a},{b}) [{b},{c})")));
        }
        Ok([0..a, a..b, b..c])
    }
}

/// One long series cut chronologically, as used by the forecasting protocol.
#[derive(Debug, Clone)]
pub struct SplitSeries {
    pub series: TimeSeries,
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
    pub stats: Option<NormStats>,
}

impl SplitSeries {
    pub fn new(series: TimeSeries, spec: &SplitSpec) -> Result<Self> {
        let [train, valid, test] = spec.ranges(series.len())?;
        Ok(Self { series, train, valid, test, stats: None })
    }

    /// Z-scores the whole series with statistics of the train range.
    pub fn normalized(&self) -> Result<Self> {
        let train = self.series.slice(self.train.clone(), "train")?;
        let stats = fit_zscore([&train], self.series.n_features())?;
        Ok(Self {
            series: stats.apply(&self.series),
            train: self.train.clone(),
            valid: self.valid.clone(),
            test: self.test.clone(),
            stats: Some(stats),
        })
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Valid => self.valid.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Cuts the train range into windows of `len` timestamps every `stride`
    /// steps, as contrastive training instances.
    pub fn training_windows(&self, len: usize, stride: usize) -> Result<Dataset> {
        if len < 2 || stride == 0 {
            return Err(Error::invalid("window length must be >= 2 and stride >= 1"));
        }
        let r = self.train.clone();
        let len = len.min(r.len());
        let mut instances = Vec::new();
        let mut start = r.start;
        while start + len <= r.end {
            instances.push(self.series.slice(start..start + len, format!("w{start}"))?);
            start += stride;
        }
        let n = instances.len();
        Dataset::new("windows", instances, None, vec![Split::Train; n])
    }
}
