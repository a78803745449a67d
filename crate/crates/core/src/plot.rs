//! Minimal SVG figures: criteria-vs-metric scatter, policy trajectories and
//! augmentation example strips.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_batch, Registry};
use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::train::{write_csv, PolicyRecord};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// One augmentation configuration of a criteria sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub criteria: f64,
    pub metric: f64,
}

fn span(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn scale(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, xlabel: &str, ylabel: &str, xs: (f64, f64), ys: (f64, f64)) {
    let _ = writeln!(
        out,
        "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{0}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\
         <text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 12.0,
        escape(xlabel),
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (v, x) in [(xs.0, PAD), (xs.1, W - PAD)] {
        let _ = writeln!(out, "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{v:.3}</text>", H - PAD + 14.0);
    }
    for (v, y) in [(ys.0, H - PAD), (ys.1, PAD)] {
        let _ = writeln!(out, "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\">{v:.3}</text>", PAD - 4.0);
    }
}

fn write(path: &Path, svg: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, svg + "</svg>\n").map_err(|e| Error::io(path, e))
}

/// Scatter of negated criteria against the downstream metric, annotated
/// with the rank correlation, plus a CSV with one row per configuration.
/// Returns the correlation (`None` when undefined).
pub fn plot_criteria_scatter(points: &[SweepPoint], metric: &str, svg: &Path, csv: &Path) -> Result<Option<f64>> {
    if points.len() < 2 {
        return Err(Error::invalid(format!("scatter needs at least 2 configurations, got {}", points.len())));
    }
    let neg: Vec<f64> = points.iter().map(|p| -p.criteria).collect();
    let m: Vec<f64> = points.iter().map(|p| p.metric).collect();
    let rho = spearman(&neg, &m);
    let rho_txt = rho.map_or("NA".to_string(), |r| format!("{r:.3}"));
    let mut out = svg_open(&format!("{metric} vs negated criteria (Spearman {rho_txt})"));
    let (xs, ys) = (span(neg.iter().copied()), span(m.iter().copied()));
    axes(&mut out, "-criteria", metric, xs, ys);
    for (p, (&x, &y)) in points.iter().zip(neg.iter().zip(&m)) {
        let (cx, cy) = (scale(x, xs, PAD, W - PAD), scale(y, ys, H - PAD, PAD));
        let _ = writeln!(
            out,
            "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"4\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            PALETTE[0],
            cx + 6.0,
            cy - 4.0,
            escape(&p.label)
        );
    }
    write(svg, out)?;
    write_csv(csv, points)?;
    Ok(rho)
}

/// Normalised weight of every transform against the epoch.
pub fn plot_policy_trajectory(records: &[PolicyRecord], svg: &Path) -> Result<()> {
    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.transform.as_str()) {
            names.push(&r.transform);
        }
    }
    let epochs = span(records.iter().map(|r| r.epoch as f64));
    let mut out = svg_open("policy weights per epoch");
    let ys = (0.0, records.iter().map(|r| r.normalized_weight).fold(0.0, f64::max).max(1e-9));
    axes(&mut out, "epoch", "normalized weight", epochs, ys);
    for (k, name) in names.iter().enumerate() {
        let pts: Vec<String> = records
            .iter()
            .filter(|r| r.transform == *name)
            .map(|r| {
                format!(
                    "{:.1},{:.1}",
                    scale(r.epoch as f64, epochs, PAD, W - PAD),
                    scale(r.normalized_weight, ys, H - PAD, PAD)
                )
            })
            .collect();
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            pts.join(" "),
            W - PAD + 4.0,
            PAD + 14.0 * k as f64,
            escape(name)
        );
    }
    write(svg, out)
}

/// One row per transform: the first feature of `series` (grey) and its
/// transformed version (colour).
pub fn plot_augmentation_strips(series: &TimeSeries, registry: &Registry, seed: u64, svg: &Path) -> Result<()> {
    let t = series.len();
    if t < 2 {
        return Err(Error::invalid("series too short to plot"));
    }
    let x = Array3::from_shape_fn((1, t, series.n_features()), |(_, i, f)| series.values[[i, f]]);
    let m = Array3::from_shape_fn((1, t, series.n_features()), |(_, i, f)| series.mask[[i, f]]);
    let rows = registry.len();
    let rh = 90.0;
    let height = PAD + rh * rows as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let stream = RngStream::new(seed);
    for (k, tr) in registry.transforms().iter().enumerate() {
        let (v, vm) = apply_batch(tr, &x, &m, stream.derive(k as u64));
        let orig: Vec<f64> = (0..t).map(|i| x[[0, i, 0]]).collect();
        let aug: Vec<f64> = (0..t).map(|i| if vm[[0, i, 0]] { v[[0, i, 0]] } else { f64::NAN }).collect();
        let ys = span(orig.iter().chain(aug.iter()).copied().filter(|v| v.is_finite()));
        let top = PAD / 2.0 + rh * k as f64;
        let line = |vals: &[f64]| -> String {
            vals.iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, &v)| {
                    format!(
                        "{:.1},{:.1}",
                        scale(i as f64, (0.0, (t - 1) as f64), PAD, W - PAD),
                        scale(v, ys, top + rh - 10.0, top + 10.0)
                    )
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            out,
            "<text x=\"4\" y=\"{:.1}\">{}</text>\
             <polyline fill=\"none\" stroke=\"#bbbbbb\" points=\"{}\"/>\
             <polyline fill=\"none\" stroke=\"{}\" points=\"{}\"/>",
            top + 12.0,
            escape(tr.name()),
            line(&orig),
            PALETTE[k % PALETTE.len()],
            line(&aug)
        );
    }
    write(svg, out)
}
