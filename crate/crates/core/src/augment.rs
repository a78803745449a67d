//! Candidate augmentations and the ordered registry the policy selects from.
//!
//! Every transform maps a `[T x F]` series to a `[T x F]` series, drawing its
//! randomness from the generator it is handed. Series shorter than their
//! padded length are transformed on the observed prefix only; trailing
//! padding is left as is.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// A named transform with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Transform {
    /// Additive Gaussian noise on observed entries.
    Jitter { std: f64 },
    /// One multiplicative factor per instance, drawn from `Normal(mean, std)`.
    Scaling { std: f64, mean: f64 },
    /// Zeroes all features at `ceil(ratio * T)` random timestamps.
    Cutout { ratio: f64 },
    /// Piecewise-constant random speed changes, resampled back to `T`.
    TimeWarp { n_changes: usize, max_ratio: f64 },
    /// Random contiguous crop of `floor(ratio * T)` stretched back to `T`.
    WindowSlice { ratio: f64 },
    /// One window of `ratio * T` steps time-scaled by a factor from `scales`.
    WindowWarp { ratio: f64, scales: Vec<f64> },
    /// Keeps a random contiguous window in place; the rest is zeroed and
    /// marked unobserved.
    Subsequence { min_ratio: f64, max_ratio: f64 },
}

pub const TRANSFORM_NAMES: [&str; 7] = [
    "jitter",
    "scaling",
    "cutout",
    "time_warp",
    "window_slice",
    "window_warp",
    "subsequence",
];

impl Transform {
    pub fn default_for(name: &str) -> Result<Transform> {
        Ok(match name {
            "jitter" => Transform::Jitter { std: 0.3 },
            "scaling" => Transform::Scaling { std: 0.5, mean: 1.0 },
            "cutout" => Transform::Cutout { ratio: 0.1 },
            "time_warp" => Transform::TimeWarp { n_changes: 100, max_ratio: 10.0 },
            "window_slice" => Transform::WindowSlice { ratio: 0.5 },
            "window_warp" => Transform::WindowWarp { ratio: 0.3, scales: vec![0.5, 2.0] },
            "subsequence" => Transform::Subsequence { min_ratio: 0.1, max_ratio: 1.0 },
            other => return Err(Error::invalid(format!("unknown transform {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transform::Jitter { .. } => "jitter",
            Transform::Scaling { .. } => "scaling",
            Transform::Cutout { .. } => "cutout",
            Transform::TimeWarp { .. } => "time_warp",
            Transform::WindowSlice { .. } => "window_slice",
            Transform::WindowWarp { .. } => "window_warp",
            Transform::Subsequence { .. } => "subsequence",
        }
    }

    pub fn params(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        match self {
            Transform::Jitter { std } => {
                m.insert("std", std.to_string());
            }
            Transform::Scaling { std, mean } => {
                m.insert("std", std.to_string());
                m.insert("mean", mean.to_string());
            }
            Transform::Cutout { ratio } | Transform::WindowSlice { ratio } => {
                m.insert("ratio", ratio.to_string());
            }
            Transform::TimeWarp { n_changes, max_ratio } => {
                m.insert("n_changes", n_changes.to_string());
                m.insert("max_ratio", max_ratio.to_string());
            }
            Transform::WindowWarp { ratio, scales } => {
                m.insert("ratio", ratio.to_string());
                let s: Vec<String> = scales.iter().map(f64::to_string).collect();
                m.insert("scales", s.join("/"));
            }
            Transform::Subsequence { min_ratio, max_ratio } => {
                m.insert("min_ratio", min_ratio.to_string());
                m.insert("max_ratio", max_ratio.to_string());
            }
        }
        m
    }

    /// Parses `name[:key=value[:key=value...]]`; list values use `/`, e.g.
    /// `window_warp:ratio=0.3:scales=0.5/2`. Shorthand `subsequence:ratio=r`
    /// fixes the window length to `r * T`.
    pub fn parse(spec: &str) -> Result<Transform> {
        let mut parts = spec.trim().split(':');
        let name = parts.next().unwrap_or("").trim();
        let mut t = Transform::default_for(name)?;
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value in {spec:?}, got {kv:?}")))?;
            t.set(k.trim(), v.trim())?;
        }
        t.validate()?;
        Ok(t)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
        };
        match (self, key) {
            (Transform::Jitter { std }, "std") => *std = num(value)?,
            (Transform::Scaling { std, .. }, "std") => *std = num(value)?,
            (Transform::Scaling { mean, .. }, "mean") => *mean = num(value)?,
            (Transform::Cutout { ratio }, "ratio") => *ratio = num(value)?,
            (Transform::TimeWarp { n_changes, .. }, "n_changes") => *n_changes = num(value)? as usize,
            (Transform::TimeWarp { max_ratio, .. }, "max_ratio") => *max_ratio = num(value)?,
            (Transform::WindowSlice { ratio }, "ratio") => *ratio = num(value)?,
            (Transform::WindowWarp { ratio, .. }, "ratio") => *ratio = num(value)?,
            (Transform::WindowWarp { scales, .. }, "scales") => {
                *scales = value.split('/').map(num).collect::<Result<_>>()?;
            }
            (Transform::Subsequence { min_ratio, .. }, "min_ratio") => *min_ratio = num(value)?,
            (Transform::Subsequence { max_ratio, .. }, "max_ratio") => *max_ratio = num(value)?,
            (Transform::Subsequence { min_ratio, max_ratio }, "ratio") => {
                *min_ratio = num(value)?;
                *max_ratio = *min_ratio;
            }
            (t, k) => return Err(Error::invalid(format!("{} has no parameter {k:?}", t.name()))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("{}: {m}", self.name())));
        match self {
            Transform::Jitter { std } | Transform::Scaling { std, .. } if !(*std >= 0.0) => bad("std must be >= 0"),
            Transform::Cutout { ratio } if !(0.0..1.0).contains(ratio) => bad("ratio must lie in [0, 1)"),
            Transform::TimeWarp { max_ratio, .. } if !(*max_ratio >= 1.0) => bad("max_ratio must be >= 1"),
            Transform::WindowSlice { ratio } if !(*ratio > 0.0 && *ratio <= 1.0) => bad("ratio must lie in (0, 1]"),
            Transform::WindowWarp { ratio, scales } => {
                if !(*ratio > 0.0 && *ratio < 1.0) {
                    bad("ratio must lie in (0, 1)")
                } else if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
                    bad("scales must be non-empty and positive")
                } else {
                    Ok(())
                }
            }
            Transform::Subsequence { min_ratio, max_ratio } => {
                if !(*min_ratio > 0.0 && *min_ratio <= *max_ratio && *max_ratio <= 1.0) {
                    bad("need 0 < min_ratio <= max_ratio <= 1")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Applies the transform to one `[T x F]` series.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        values: ArrayView2<f64>,
        mask: ArrayView2<bool>,
        rng: &mut R,
    ) -> (Array2<f64>, Array2<bool>) {
        let mut out_v = values.to_owned();
        let mut out_m = mask.to_owned();
        let n = observed_len(mask);
        if n == 0 {
            return (out_v, out_m);
        }
        let (v, m) = self.apply_prefix(values.slice(s![..n, ..]), mask.slice(s![..n, ..]), rng);
        out_v.slice_mut(s![..n, ..]).assign(&v);
        out_m.slice_mut(s![..n, ..]).assign(&m);
        (out_v, out_m)
    }

    fn apply_prefix<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mask: ArrayView2<bool>,
        rng: &mut R,
    ) -> (Array2<f64>, Array2<bool>) {
        let t = x.nrows();
        match self {
            Transform::Jitter { std } => {
                let mut v = x.to_owned();
                if *std > 0.0 {
                    let dist = Normal::new(0.0, *std).expect("std validated");
                    for (e, &m) in v.iter_mut().zip(mask.iter()) {
                        let noise = dist.sample(rng);
                        if m {
                            *e += noise;
                        }
                    }
                }
                (v, mask.to_owned())
            }
            Transform::Scaling { std, mean } => {
                let s = if *std > 0.0 { Normal::new(*mean, *std).expect("std validated").sample(rng) } else { *mean };
                (x.mapv(|e| e * s), mask.to_owned())
            }
            Transform::Cutout { ratio } => {
                let k = ((ratio * t as f64).ceil() as usize).min(t);
                let mut v = x.to_owned();
                for i in sample(rng, t, k) {
                    v.row_mut(i).fill(0.0);
                }
                (v, mask.to_owned())
            }
            Transform::TimeWarp { n_changes, max_ratio } => time_warp(x, mask, *n_changes, *max_ratio, rng),
            Transform::WindowSlice { ratio } => {
                let len = ((ratio * t as f64).floor() as usize).clamp(1, t);
                if len < 2 || t < 2 {
                    return (x.to_owned(), mask.to_owned());
                }
                let start = rng.random_range(0..=t - len);
                let pos: Vec<f64> = (0..t)
                    .map(|j| start as f64 + (j * (len - 1)) as f64 / (t - 1) as f64)
                    .collect();
                resample(x, mask, &pos)
            }
            Transform::WindowWarp { ratio, scales } => {
                if t < 2 {
                    return (x.to_owned(), mask.to_owned());
                }
                let w = ((ratio * t as f64).round() as usize).clamp(2, t);
                let start = rng.random_range(0..=t - w);
                let scale = scales[rng.random_range(0..scales.len())];
                let wl = ((w as f64 * scale).round() as usize).max(2);
                let mut pos: Vec<f64> = (0..start).map(|i| i as f64).collect();
                pos.extend((0..wl).map(|k| start as f64 + (k * (w - 1)) as f64 / (wl - 1) as f64));
                pos.extend((start + w..t).map(|i| i as f64));
                let (mid_v, mid_m) = resample(x, mask, &pos);
                let l = pos.len();
                let back: Vec<f64> = (0..t).map(|j| (j * (l - 1)) as f64 / (t - 1) as f64).collect();
                resample(mid_v.view(), mid_m.view(), &back)
            }
            Transform::Subsequence { min_ratio, max_ratio } => {
                let lo = ((min_ratio * t as f64).ceil() as usize).clamp(1, t);
                let hi = ((max_ratio * t as f64).ceil() as usize).clamp(lo, t);
                let len = rng.random_range(lo..=hi);
                let start = rng.random_range(0..=t - len);
                let mut v = x.to_owned();
                let mut m = mask.to_owned();
                for i in (0..start).chain(start + len..t) {
                    v.row_mut(i).fill(0.0);
                    m.row_mut(i).fill(false);
                }
                (v, m)
            }
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())?;
        for (k, v) in self.params() {
            write!(f, ":{k}={v}")?;
        }
        Ok(())
    }
}

/// Number of leading timestamps up to and including the last observed one.
pub fn observed_len(mask: ArrayView2<bool>) -> usize {
    (0..mask.nrows())
        .rev()
        .find(|&i| mask.row(i).iter().any(|&m| m))
        .map_or(0, |i| i + 1)
}

/// Linear interpolation of the rows of `x` at fractional positions within
/// `[0, T - 1]`. An interpolated entry is observed when both neighbours are.
pub fn resample(x: ArrayView2<f64>, mask: ArrayView2<bool>, pos: &[f64]) -> (Array2<f64>, Array2<bool>) {
    let (t, f) = x.dim();
    let mut v = Array2::zeros((pos.len(), f));
    let mut m = Array2::from_elem((pos.len(), f), false);
    for (j, &p) in pos.iter().enumerate() {
        let p = p.clamp(0.0, (t - 1) as f64);
        let lo = p.floor() as usize;
        let frac = p - lo as f64;
        if frac == 0.0 || lo + 1 >= t {
            v.row_mut(j).assign(&x.row(lo));
            m.row_mut(j).assign(&mask.row(lo));
        } else {
            for c in 0..f {
                v[[j, c]] = x[[lo, c]] * (1.0 - frac) + x[[lo + 1, c]] * frac;
                m[[j, c]] = mask[[lo, c]] && mask[[lo + 1, c]];
            }
        }
    }
    (v, m)
}

fn time_warp<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    mask: ArrayView2<bool>,
    n_changes: usize,
    max_ratio: f64,
    rng: &mut R,
) -> (Array2<f64>, Array2<bool>) {
    let t = x.nrows();
    if t < 2 {
        return (x.to_owned(), mask.to_owned());
    }
    let steps = t - 1;
    let n = n_changes.min(steps - 1);
    let mut cuts: Vec<usize> = sample(rng, steps - 1, n).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    cuts.push(steps);
    // Speed of each inter-sample step; constant within a segment.
    let mut speed = Vec::with_capacity(steps);
    let mut prev = 0;
    for &c in &cuts {
        let s = if max_ratio > 1.0 { rng.random_range(1.0..max_ratio) } else { 1.0 };
        speed.extend(std::iter::repeat_n(s, c - prev));
        prev = c;
    }
    // Warped arrival time of every original sample, rescaled to [0, T-1].
    let mut knots = Vec::with_capacity(t);
    let mut acc = 0.0;
    knots.push(0.0);
    for s in &speed {
        acc += s;
        knots.push(acc);
    }
    let scale = steps as f64 / acc;
    for k in knots.iter_mut() {
        *k *= scale;
    }
    // Invert the monotone map: output j reads the original series at the
    // fractional time u with knots(u) = j.
    let mut pos = Vec::with_capacity(t);
    let mut seg = 0;
    for j in 0..t {
        let target = j as f64;
        while seg + 1 < steps && knots[seg + 1] < target {
            seg += 1;
        }
        let (a, b) = (knots[seg], knots[seg + 1]);
        let u = if b > a { seg as f64 + ((target - a) / (b - a)).clamp(0.0, 1.0) } else { seg as f64 };
        pos.push(u);
    }
    resample(x, mask, &pos)
}

/// The ordered candidate set the policy chooses from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    transforms: Vec<Transform>,
}

impl Registry {
    pub fn new(transforms: Vec<Transform>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::invalid("registry needs at least one transform"));
        }
        for (i, t) in transforms.iter().enumerate() {
            t.validate()?;
            if transforms[..i].iter().any(|u| u.name() == t.name()) {
                return Err(Error::invalid(format!("duplicate transform {:?}", t.name())));
            }
        }
        Ok(Self { transforms })
    }

    /// The seven candidates with default parameters, in canonical order.
    pub fn full() -> Self {
        Self {
            transforms: TRANSFORM_NAMES
                .iter()
                .map(|n| Transform::default_for(n).expect("known name"))
                .collect(),
        }
    }

    pub fn subset(names: &[&str]) -> Result<Self> {
        Self::new(names.iter().map(|n| Transform::default_for(n)).collect::<Result<_>>()?)
    }

    /// Parses a comma-separated list such as `jitter:std=0.3,subsequence`.
    pub fn parse(spec: &str) -> Result<Self> {
        Self::new(spec.split(',').filter(|s| !s.trim().is_empty()).map(Transform::parse).collect::<Result<_>>()?)
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.transforms.iter().map(Transform::name).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.transforms.iter().position(|t| t.name() == name)
    }

    pub fn spec_string(&self) -> String {
        self.transforms.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::full()
    }
}

/// Applies `transform` to every instance of a `[B x T x F]` batch; instance
/// `b` draws from `stream.derive(b)`.
pub fn apply_batch(
    transform: &Transform,
    values: &Array3<f64>,
    mask: &Array3<bool>,
    stream: RngStream,
) -> (Array3<f64>, Array3<bool>) {
    let mut out_v = values.clone();
    let mut out_m = mask.clone();
    for b in 0..values.dim().0 {
        let mut rng = stream.derive(b as u64).rng();
        let (v, m) = transform.apply(values.slice(s![b, .., ..]), mask.slice(s![b, .., ..]), &mut rng);
        out_v.slice_mut(s![b, .., ..]).assign(&v);
        out_m.slice_mut(s![b, .., ..]).assign(&m);
    }
    (out_v, out_m)
}
