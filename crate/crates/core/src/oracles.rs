//! Brute-force oracles on small discrete systems.
//!
//! Exact entropies and mutual informations over explicit probability
//! tables, random one-to-many augmentation channels, a Monte Carlo check of
//! the low-temperature gate limit, and a central-difference gradient.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::augment::{Registry, Transform};
use crate::error::{Error, Result};
use crate::policy::{build_views, gate_from_noise, sample_gates, GateSample, PolicyState};
use crate::train::{EncoderSpec, Mode, TrainConfig, TrainState};
use crate::rng::RngStream;

pub const NORMALIZATION_TOL: f64 = 1e-12;
pub const PROPERTY_TOL: f64 = 1e-12;
pub const MAX_X: usize = 16;
pub const MAX_Y: usize = 8;
pub const MAX_V: usize = 64;

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn check_dist(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL * p.len().max(1) as f64 {
        return Err(Error::invalid(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_dist(p, "distribution")?;
    Ok(-p.iter().map(|&x| plogp(x)).sum::<f64>())
}

/// `MI = H(a) + H(b) - H(a, b)` for a joint table `p[a][b]`.
pub fn mutual_information(joint: &[Vec<f64>]) -> Result<f64> {
    let flat: Vec<f64> = joint.iter().flatten().copied().collect();
    let w = joint.first().map_or(0, Vec::len);
    if joint.iter().any(|r| r.len() != w) {
        return Err(Error::Shape("ragged joint table".into()));
    }
    check_dist(&flat, "joint table")?;
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..w).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let h = |p: &[f64]| -p.iter().map(|&x| plogp(x)).sum::<f64>();
    Ok(h(&pa) + h(&pb) - h(&flat))
}

/// `P(x, y)` over small finite alphabets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub p: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    pub fn new(p: Vec<Vec<f64>>) -> Result<Self> {
        let nx = p.len();
        let ny = p.first().map_or(0, Vec::len);
        if nx == 0 || nx > MAX_X || ny == 0 || ny > MAX_Y {
            return Err(Error::invalid(format!("joint table {nx}x{ny} outside 1..={MAX_X} x 1..={MAX_Y}")));
        }
        if p.iter().any(|r| r.len() != ny) {
            return Err(Error::Shape("ragged joint table".into()));
        }
        check_dist(&p.iter().flatten().copied().collect::<Vec<_>>(), "joint table")?;
        Ok(Self { p })
    }

    pub fn nx(&self) -> usize {
        self.p.len()
    }

    pub fn ny(&self) -> usize {
        self.p[0].len()
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.p.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn mutual_information(&self) -> f64 {
        mutual_information(&self.p).expect("validated table")
    }

    /// Joint `P(v, y) = sum_x P(x, y) P(v | x)`.
    pub fn push_through(&self, channel: &Channel) -> Result<Vec<Vec<f64>>> {
        if channel.nx() != self.nx() {
            return Err(Error::Shape(format!("channel has {} inputs, joint has {}", channel.nx(), self.nx())));
        }
        let mut out = vec![vec![0.0; self.ny()]; channel.nv()];
        for (x, row) in self.p.iter().enumerate() {
            for (v, &pv) in channel.rows[x].iter().enumerate() {
                for (y, &pxy) in row.iter().enumerate() {
                    out[v][y] += pxy * pv;
                }
            }
        }
        Ok(out)
    }
}

/// Augmentation channel `P(v | x)`, one row per input outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub rows: Vec<Vec<f64>>,
}

impl Channel {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let nv = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || nv == 0 || nv > MAX_V {
            return Err(Error::invalid(format!("channel output alphabet {nv} outside 1..={MAX_V}")));
        }
        for (x, r) in rows.iter().enumerate() {
            if r.len() != nv {
                return Err(Error::Shape("ragged channel".into()));
            }
            check_dist(r, &format!("channel row {x}"))?;
        }
        Ok(Self { rows })
    }

    pub fn identity(n: usize) -> Self {
        Self { rows: (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect() }
    }

    pub fn nx(&self) -> usize {
        self.rows.len()
    }

    pub fn nv(&self) -> usize {
        self.rows[0].len()
    }

    /// True when no output outcome is reachable from two different inputs.
    pub fn has_disjoint_supports(&self) -> bool {
        (0..self.nv()).all(|v| self.rows.iter().filter(|r| r[v] > 0.0).count() <= 1)
    }

    /// True when every input maps to a single output.
    pub fn is_deterministic(&self) -> bool {
        self.rows.iter().all(|r| r.iter().filter(|&&p| p > 0.0).count() == 1)
    }

    pub fn output_marginal(&self, px: &[f64]) -> Result<Vec<f64>> {
        if px.len() != self.nx() {
            return Err(Error::Shape(format!("marginal has {} outcomes, channel {}", px.len(), self.nx())));
        }
        check_dist(px, "marginal")?;
        Ok((0..self.nv()).map(|v| px.iter().zip(&self.rows).map(|(p, r)| p * r[v]).sum()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub holds: bool,
    /// `|MI(v;y) - MI(x;y)|` for the first property, `max(0, H(x) - H(v))`
    /// for the second.
    pub residual: f64,
    pub disjoint: bool,
}

/// Label information survives a one-to-many channel unchanged.
pub fn check_property1(joint: &DiscreteJoint, channel: &Channel) -> Result<PropertyCheck> {
    let vy = joint.push_through(channel)?;
    let residual = (mutual_information(&vy)? - joint.mutual_information()).abs();
    Ok(PropertyCheck { holds: residual <= PROPERTY_TOL, residual, disjoint: channel.has_disjoint_supports() })
}

/// A one-to-many channel never loses entropy.
pub fn check_property2(px: &[f64], channel: &Channel) -> Result<PropertyCheck> {
    let hv = entropy(&channel.output_marginal(px)?)?;
    let hx = entropy(px)?;
    let residual = (hx - hv).max(0.0);
    Ok(PropertyCheck { holds: hv >= hx - PROPERTY_TOL, residual, disjoint: channel.has_disjoint_supports() })
}

fn dirichlet1<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Uniform-Dirichlet joint table.
pub fn random_joint<R: Rng + ?Sized>(nx: usize, ny: usize, rng: &mut R) -> Result<DiscreteJoint> {
    let flat = dirichlet1(nx * ny, rng);
    DiscreteJoint::new(flat.chunks(ny).map(<[f64]>::to_vec).collect())
}

/// Random channel whose output alphabet is split into `nx` non-empty
/// blocks, one per input; each row is uniform-Dirichlet on its block.
pub fn random_disjoint_channel<R: Rng + ?Sized>(nx: usize, nv: usize, rng: &mut R) -> Result<Channel> {
    if nv < nx {
        return Err(Error::invalid(format!("need at least {nx} outputs for {nx} inputs, got {nv}")));
    }
    // a random owner for every output, with the first nx outputs forced to
    // cover every input so no block is empty
    let mut owner: Vec<usize> = (0..nv).map(|v| if v < nx { v } else { rng.random_range(0..nx) }).collect();
    for i in (1..nv).rev() {
        owner.swap(i, rng.random_range(0..=i));
    }
    let mut rows = vec![vec![0.0; nv]; nx];
    for (x, row) in rows.iter_mut().enumerate() {
        let block: Vec<usize> = (0..nv).filter(|&v| owner[v] == x).collect();
        for (&v, w) in block.iter().zip(dirichlet1(block.len(), rng)) {
            row[v] = w;
        }
        // renormalize exactly against round-off in the division
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    Channel::new(rows)
}

/// Overlapping channel that merges inputs 0 and 1 into output 0 and keeps
/// the rest; with labels that separate the two inputs it loses label
/// information.
pub fn merging_channel(nx: usize) -> Result<Channel> {
    if nx < 2 {
        return Err(Error::invalid("merging needs at least two inputs"));
    }
    let nv = nx - 1;
    Channel::new((0..nx).map(|x| (0..nv).map(|v| if v == x.saturating_sub(1) { 1.0 } else { 0.0 }).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertySweep {
    pub cases: usize,
    pub property1_violations: usize,
    pub property2_violations: usize,
    pub max_residual1: f64,
    pub max_residual2: f64,
    /// The overlapping negative control broke the first property.
    pub negative_control_violates: bool,
    pub negative_control_residual: f64,
}

impl PropertySweep {
    pub fn ok(&self) -> bool {
        self.property1_violations == 0 && self.property2_violations == 0 && self.negative_control_violates
    }
}

/// Random disjoint-support cases with `|X| <= 16`, `|Y| <= 8`, `|V| <= 64`
/// plus one overlapping control case.
pub fn sweep_properties(cases: usize, seed: u64) -> Result<PropertySweep> {
    let root = RngStream::new(seed);
    let mut out = PropertySweep {
        cases,
        property1_violations: 0,
        property2_violations: 0,
        max_residual1: 0.0,
        max_residual2: 0.0,
        negative_control_violates: false,
        negative_control_residual: 0.0,
    };
    for c in 0..cases {
        let mut rng = root.derive(c as u64).rng();
        let nx = rng.random_range(1..=MAX_X);
        let ny = rng.random_range(1..=MAX_Y);
        let nv = rng.random_range(nx..=MAX_V);
        let joint = random_joint(nx, ny, &mut rng)?;
        let channel = random_disjoint_channel(nx, nv, &mut rng)?;
        let p1 = check_property1(&joint, &channel)?;
        let p2 = check_property2(&joint.marginal_x(), &channel)?;
        out.property1_violations += usize::from(!p1.holds);
        out.property2_violations += usize::from(!p2.holds);
        out.max_residual1 = out.max_residual1.max(p1.residual);
        out.max_residual2 = out.max_residual2.max(p2.residual);
    }
    // x0 -> y0 and x1 -> y1 get merged, so MI(v;y) < MI(x;y)
    let control = DiscreteJoint::new(vec![vec![0.25, 0.0], vec![0.0, 0.25], vec![0.25, 0.25]])?;
    let nc = check_property1(&control, &merging_channel(3)?)?;
    out.negative_control_violates = !nc.holds && !nc.disjoint;
    out.negative_control_residual = nc.residual;
    Ok(out)
}

/// Empirical `P(a > 0.5)` for a relaxed gate with probability `p`.
pub fn check_concrete_limit(p: f64, tau: f64, n_samples: usize, seed: u64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("p must lie in (0, 1), got {p}")));
    }
    let registry = Registry::new(vec![Transform::Jitter { std: 0.0 }])?;
    let mut policy = PolicyState::new(&registry, tau);
    policy.logits[0] = (p / (1.0 - p)).ln();
    let mut rng = RngStream::new(seed).rng();
    let mut hits = 0usize;
    for _ in 0..n_samples {
        hits += usize::from(sample_gates(&policy, &mut rng)?.a[0] > 0.5);
    }
    Ok(hits as f64 / n_samples.max(1) as f64)
}

/// Three-sigma binomial band around `p` for `n` draws.
pub fn binomial_band(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Central differences of `f` at `point`, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut x = point.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = x[i];
        x[i] = x0 + h;
        let fp = f(&x)?;
        x[i] = x0 - h;
        let fm = f(&x)?;
        x[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::invalid(format!("non-finite evaluation at coordinate {i}")));
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|)`.
    pub max_rel_err: f64,
}

/// Toy setting for the criteria-vs-logits gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientToy {
    pub instances: usize,
    pub length: usize,
    pub depth: usize,
    pub tau: f64,
    pub h: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradientToy {
    fn default() -> Self {
        Self { instances: 4, length: 32, depth: 2, tau: 1.0, h: 1e-4, mode: Mode::Unsupervised, seed: 0 }
    }
}

/// Compares the backpropagated gradient of the criteria w.r.t. the policy
/// logits with central differences, holding the gate noise and every
/// transform's randomness fixed.
pub fn check_criteria_gradient(toy: &GradientToy) -> Result<GradientCheck> {
    let root = RngStream::new(toy.seed);
    let mut rng = root.derive(0).rng();
    let b = toy.instances;
    let x = Array3::from_shape_fn((b, toy.length, 1), |(i, t, _)| {
        (t as f64 * 0.3 + i as f64).sin() + 0.3 * rng.random_range(-1.0..1.0)
    });
    let mask = Array3::from_elem(x.raw_dim(), true);
    let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
    let registry = Registry::full();
    let config = TrainConfig {
        mode: toy.mode,
        batch_size: b,
        seed: toy.seed,
        encoder: EncoderSpec { channels: 8, depth: toy.depth, output_dim: 16, ..EncoderSpec::default() },
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(config, &registry, 1, Some(2))?;
    for (i, q) in state.policy.logits.iter_mut().enumerate() {
        *q = (i as f64 * 0.7).sin();
    }
    state.policy.temperature = toy.tau;
    let gates = sample_gates(&state.policy, &mut root.derive(1).rng())?;
    let stream = root.derive(2);
    let labels = (toy.mode == Mode::Supervised).then_some(&labels[..]);
    let eval_at = |q: &[f64]| -> Result<(f64, Vec<f64>)> {
        let a = q.iter().zip(&gates.eps).map(|(&q, &e)| gate_from_noise(q, e, toy.tau)).collect();
        let g = GateSample { a, eps: gates.eps.clone(), temperature: toy.tau };
        let views = build_views(&x, &mask, &g.a, &state.registry, stream)?;
        let e = state.criteria_gradient(&x, &mask, labels, &g, &views)?;
        Ok((e.value, e.logit_grad))
    };
    let q0 = state.policy.logits.clone();
    let analytic = eval_at(&q0)?.1;
    let numeric = finite_difference_gradient(|q| eval_at(q).map(|r| r.0), &q0, toy.h)?;
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale == 0.0 {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max);
    Ok(GradientCheck { analytic, numeric, max_rel_err })
}

/// Leave-one-out estimate for one-hot representations scaled by `scale`,
/// counted directly: for source `i`, the positive scores `scale^2` if view
/// `i` shares its symbol, and the denominator has one `exp(scale^2)` term per
/// other view sharing the symbol and `exp(0)` for the rest.
pub fn l1out_one_hot(x_symbols: &[usize], v_symbols: &[usize], scale: f64) -> Result<f64> {
    let b = x_symbols.len();
    if b < 2 || v_symbols.len() != b {
        return Err(Error::invalid("need two equal-length symbol lists of length >= 2"));
    }
    let s = scale * scale;
    let mut total = 0.0;
    for i in 0..b {
        let matches = (0..b).filter(|&j| j != i && v_symbols[j] == x_symbols[i]).count() as f64;
        let pos = if v_symbols[i] == x_symbols[i] { s } else { 0.0 };
        total += pos - (matches * s.exp() + (b as f64 - 1.0 - matches)).ln();
    }
    Ok(total / b as f64)
}
