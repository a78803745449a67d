//! Synthetic benchmarks with a planted class structure.
//!
//! Each instance is a smooth random background plus one Gaussian bump at a
//! random position whose shape encodes the class: even classes point up, odd
//! classes point down, and every further pair of classes doubles the width.
//! Transforms that keep the bump (noise, warps, mild scaling) preserve the
//! label; transforms that crop or erase most of the series, or flip signs,
//! destroy it.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{Registry, Transform};
use crate::data::{Dataset, Split, TimeSeries};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::train::{Ablation, EncoderSpec, Mode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub length: usize,
    pub classes: usize,
    pub bump_height: f64,
    pub bump_width: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self { n_train: 100, n_test: 100, length: 128, classes: 2, bump_height: 3.0, bump_width: 3.0, noise: 0.3, seed: 0 }
    }
}

/// Generates the planted-bump dataset; instances alternate classes so
/// every split is balanced.
pub fn planted_bumps(cfg: &PlantedConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::invalid("planted benchmark needs at least 2 classes"));
    }
    let root = RngStream::new(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let t = cfg.length;
    if cfg.bump_width * 2f64.powi((cfg.classes as i32 - 1) / 2) * 4.0 > t as f64 {
        return Err(Error::invalid("bumps too wide for the series length"));
    }
    let n = cfg.n_train + cfg.n_test;
    let mut instances = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.derive(i as u64).rng();
        let class = i % cfg.classes;
        let sign = if class % 2 == 0 { 1.0 } else { -1.0 };
        let width = cfg.bump_width * 2f64.powi((class / 2) as i32);
        let center = rng.random_range(2.0 * width..t as f64 - 2.0 * width);
        let freq = rng.random_range(1.0..3.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.2..0.8);
        let values = Array2::from_shape_fn((t, 1), |(j, _)| {
            let x = j as f64;
            let bump = sign * cfg.bump_height * (-0.5 * ((x - center) / width).powi(2)).exp();
            bump + amp * (2.0 * PI * freq * x / t as f64 + phase).sin()
        });
        let values = values.mapv(|v| v + noise.sample(&mut rng));
        instances.push(TimeSeries::new(values, format!("planted{i}"))?);
        labels.push(class);
        splits.push(if i < cfg.n_train { Split::Train } else { Split::Test });
    }
    let mut ds = Dataset::new("planted", instances, Some(labels), splits)?.with_num_classes(cfg.classes)?;
    ds.class_names = (0..cfg.classes).map(|c| format!("shape{c}")).collect();
    Ok(ds)
}

/// One label-preserving transform (light jitter) followed by two
/// label-destroying ones (a 10% crop and a 90% cutout).
pub fn preserving_first_registry() -> Registry {
    Registry::new(vec![
        Transform::Jitter { std: 0.3 },
        Transform::Subsequence { min_ratio: 0.1, max_ratio: 0.1 },
        Transform::Cutout { ratio: 0.9 },
    ])
    .expect("valid transforms")
}

/// The seven default candidates with one destroyer: the scaling factor is
/// drawn around `-(K - 1)`, so with its gate open the averaged view cancels
/// the series instead of rescaling it. The window slice keeps 90% of the
/// series so it almost never cuts the bump away.
pub fn one_destroyer_registry() -> Registry {
    let k = Registry::full().len() as f64;
    let t = Registry::full()
        .transforms()
        .iter()
        .map(|t| match t {
            Transform::Scaling { .. } => Transform::Scaling { std: 0.5, mean: -(k - 1.0) },
            Transform::WindowSlice { .. } => Transform::WindowSlice { ratio: 0.9 },
            other => other.clone(),
        })
        .collect();
    Registry::new(t).expect("valid transforms")
}

pub const DESTROYER: &str = "scaling";

/// The benchmark instance used for policy experiments: a weak bump
/// (height 1.5 over unit-amplitude noise and background) so that heavy
/// erasure really does remove the label.
pub fn planted_benchmark(seed: u64) -> PlantedConfig {
    PlantedConfig { bump_height: 1.5, seed, ..PlantedConfig::default() }
}

/// Training preset for the planted benchmark: a small encoder, a strong
/// fidelity weight, and faster policy and head updates than the encoder.
pub fn planted_train_config(mode: Mode, ablation: Ablation, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        mode,
        ablation,
        seed,
        beta: 10.0,
        meta_lr: Some(0.05),
        head_lr: Some(0.01),
        encoder: EncoderSpec { channels: 32, depth: 4, output_dim: 64, ..EncoderSpec::default() },
        ..TrainConfig::default()
    }
}
