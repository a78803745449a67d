//! Augmentation-selection policy: one logit per candidate transform, relaxed
//! Bernoulli gates, and the gated average of per-transform views.

use ndarray::{Array3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_batch, Registry};
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::rng::RngStream;

/// Logits are kept in `[-LOGIT_CLAMP, LOGIT_CLAMP]` so probabilities stay
/// strictly inside (0, 1).
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub names: Vec<String>,
    pub logits: Vec<f64>,
    pub temperature: f64,
}

impl PolicyState {
    /// Uniform prior: every logit starts at 0 (p = 0.5).
    pub fn new(registry: &Registry, temperature: f64) -> Self {
        Self {
            names: registry.names().iter().map(|s| s.to_string()).collect(),
            logits: vec![0.0; registry.len()],
            temperature,
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&q| sigmoid(q)).collect()
    }

    pub fn clamp(&mut self) {
        for q in &mut self.logits {
            *q = q.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        }
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        policy_weights_snapshot(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSample {
    pub a: Vec<f64>,
    pub eps: Vec<f64>,
    pub temperature: f64,
}

impl GateSample {
    /// Fixed gates with no noise; derivatives w.r.t. the logits are zero.
    pub fn fixed(a: Vec<f64>) -> Self {
        let n = a.len();
        Self { a, eps: vec![0.5; n], temperature: f64::INFINITY }
    }

    /// `da_i / dq_i` for frozen noise.
    pub fn dgate_dlogit(&self) -> Vec<f64> {
        self.a.iter().map(|&a| a * (1.0 - a) / self.temperature).collect()
    }
}

/// Relaxed Bernoulli gate for logit `q`, noise `eps` and temperature `tau`.
pub fn gate_from_noise(q: f64, eps: f64, tau: f64) -> f64 {
    sigmoid((eps.ln() - (1.0 - eps).ln() + q) / tau)
}

pub fn sample_gates<R: Rng + ?Sized>(policy: &PolicyState, rng: &mut R) -> Result<GateSample> {
    let tau = policy.temperature;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let eps: Vec<f64> = policy
        .logits
        .iter()
        .map(|_| loop {
            let e: f64 = rng.random();
            if e > 0.0 {
                break e;
            }
        })
        .collect();
    let a = policy.logits.iter().zip(&eps).map(|(&q, &e)| gate_from_noise(q, e, tau)).collect();
    Ok(GateSample { a, eps, temperature: tau })
}

/// Which entries of a view count as observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ViewMask {
    /// The source mask; dropped entries enter the average as zeros.
    #[default]
    Source,
    /// Also hide entries dropped by any transform whose gate is above one
    /// half, so pooling never reads them.
    Intersect,
}

/// A gated view batch together with the per-transform outputs needed for the
/// gate gradient.
#[derive(Debug, Clone)]
pub struct Views {
    pub values: Array3<f64>,
    pub mask: Array3<bool>,
    pub transformed: Vec<Array3<f64>>,
}

impl Views {
    /// `dL/da_i = sum(dL/dv * (t_i(x) - x)) / |T|`.
    pub fn gate_grad(&self, x: &Array3<f64>, dv: &Array3<f64>) -> Vec<f64> {
        let k = self.transformed.len() as f64;
        self.transformed
            .iter()
            .map(|t| {
                let mut acc = 0.0;
                Zip::from(t).and(x).and(dv).for_each(|&ti, &xi, &g| acc += g * (ti - xi));
                acc / k
            })
            .collect()
    }

    /// Chain rule through the relaxed gates.
    pub fn logit_grad(&self, x: &Array3<f64>, dv: &Array3<f64>, gates: &GateSample) -> Vec<f64> {
        self.gate_grad(x, dv).iter().zip(gates.dgate_dlogit()).map(|(g, d)| g * d).collect()
    }
}

/// Builds `v = (1/|T|) sum_i ((1 - a_i) x + a_i t_i(x))`. Transform `i`
/// draws from `stream.derive(i)`. The view keeps the source mask: entries a
/// transform drops enter the average as zeros, so their effect stays
/// differentiable in the gates.
pub fn build_views(
    values: &Array3<f64>,
    mask: &Array3<bool>,
    gates: &[f64],
    registry: &Registry,
    stream: RngStream,
) -> Result<Views> {
    build_views_masked(values, mask, gates, registry, stream, ViewMask::Source)
}

/// [`build_views`] with a choice of view mask.
pub fn build_views_masked(
    values: &Array3<f64>,
    mask: &Array3<bool>,
    gates: &[f64],
    registry: &Registry,
    stream: RngStream,
    view_mask: ViewMask,
) -> Result<Views> {
    if registry.is_empty() {
        return Err(Error::invalid("empty transform set"));
    }
    if gates.len() != registry.len() {
        return Err(Error::Shape(format!("{} gates for {} transforms", gates.len(), registry.len())));
    }
    let k = registry.len() as f64;
    let mut out = Array3::zeros(values.raw_dim());
    let mut transformed = Vec::with_capacity(registry.len());
    let mut out_mask = mask.clone();
    for (i, (t, &a)) in registry.transforms().iter().zip(gates).enumerate() {
        let (tv, tm) = apply_batch(t, values, mask, stream.derive(i as u64));
        if view_mask == ViewMask::Intersect && a > 0.5 {
            Zip::from(&mut out_mask).and(&tm).for_each(|o, &m| *o &= m);
        }
        Zip::from(&mut out).and(values).and(&tv).for_each(|o, &x, &y| *o += (1.0 - a) * x + a * y);
        transformed.push(tv);
    }
    if gates.iter().all(|&a| a == 0.0) {
        // Exact identity rather than an average of identical terms.
        out.assign(values);
    } else {
        out.mapv_inplace(|x| x / k);
    }
    Ok(Views { values: out, mask: out_mask, transformed })
}

/// `tau_e = max(tau_end, tau_start * (tau_end / tau_start)^(e / (E - 1)))`.
pub fn anneal_temperature(epoch: usize, total_epochs: usize, tau_start: f64, tau_end: f64) -> Result<f64> {
    if tau_start < tau_end || !(tau_end > 0.0) {
        return Err(Error::invalid(format!("invalid temperature range {tau_start} -> {tau_end}")));
    }
    if epoch >= total_epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    if total_epochs == 1 {
        return Ok(tau_start);
    }
    let frac = epoch as f64 / (total_epochs - 1) as f64;
    Ok((tau_start * (tau_end / tau_start).powf(frac)).max(tau_end))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub names: Vec<String>,
    pub p: Vec<f64>,
    pub normalized: Vec<f64>,
}

pub fn policy_weights_snapshot(policy: &PolicyState) -> PolicySnapshot {
    let p = policy.probabilities();
    let total: f64 = p.iter().sum();
    let normalized = p.iter().map(|x| x / total).collect();
    PolicySnapshot { names: policy.names.clone(), p, normalized }
}
