//! Alternating optimisation of encoder, augmentation policy and classifier
//! head, with ablation switches, logging and checkpoints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_batch, Registry, Transform};
use crate::data::{batch_plan, Batch, Dataset};
use crate::encoder::{split_subsequences, ClassifierHead, Encoder, EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam};
use crate::objectives::{
    fidelity_ce_pseudolabel, fidelity_ce_supervised, global_contrastive, l1out_variety, local_contrastive,
    normalize_rows, normalize_rows_backward, LossReport,
};
use crate::policy::{
    anneal_temperature, build_views_masked, sample_gates, GateSample, PolicySnapshot, PolicyState, ViewMask, Views,
};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Unsupervised,
    /// Labels feed only the fidelity term of the policy update.
    Supervised,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(Mode::Unsupervised),
            "supervised" => Ok(Mode::Supervised),
            _ => Err(Error::invalid(format!("unknown mode {s:?}"))),
        }
    }
}

/// How pseudo-label fidelity is scored without labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PseudoHead {
    /// Similarity logits between views and the batch's source instances.
    #[default]
    Similarity,
    /// A trained affine head with one output per batch slot.
    Affine,
}

/// Which representations the classifier head is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadInput {
    /// The augmented views.
    #[default]
    View,
    /// The original instances.
    Original,
    /// Both, stacked.
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum Ablation {
    #[default]
    None,
    /// Uniformly random one-hot gates; policy untrained.
    Random,
    /// Every gate at 1, views averaged.
    All,
    /// Every transform composed in registry order.
    AllSequential,
    NoFidelity,
    NoVariety,
    /// One fixed transform, given by name or full spec.
    Single(String),
}

impl Ablation {
    pub fn trains_policy(&self) -> bool {
        matches!(self, Ablation::None | Ablation::NoFidelity | Ablation::NoVariety)
    }

    /// Candidate set actually used under this ablation.
    pub fn effective_registry(&self, registry: &Registry) -> Result<Registry> {
        match self {
            Ablation::Single(spec) => {
                let name = spec.split(':').next().unwrap_or_default();
                match registry.position(name) {
                    Some(i) if !spec.contains(':') => Registry::new(vec![registry.transforms()[i].clone()]),
                    _ => Registry::new(vec![Transform::parse(spec)?]),
                }
            }
            _ => Ok(registry.clone()),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Ablation::None,
            "random" | "random_aug" => Ablation::Random,
            "all" | "all_aug" => Ablation::All,
            "all_sequential" => Ablation::AllSequential,
            "no_fidelity" => Ablation::NoFidelity,
            "no_variety" => Ablation::NoVariety,
            _ => match s.strip_prefix("single:") {
                Some(spec) if !spec.is_empty() => {
                    Transform::parse(spec)?;
                    Ablation::Single(spec.to_string())
                }
                _ => return Err(Error::invalid(format!("unknown ablation {s:?}"))),
            },
        })
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.to_string()
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::None => f.write_str("none"),
            Ablation::Random => f.write_str("random"),
            Ablation::All => f.write_str("all"),
            Ablation::AllSequential => f.write_str("all_sequential"),
            Ablation::NoFidelity => f.write_str("no_fidelity"),
            Ablation::NoVariety => f.write_str("no_variety"),
            Ablation::Single(s) => write!(f, "single:{s}"),
        }
    }
}

/// Architecture knobs; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub channels: usize,
    pub depth: usize,
    pub kernel: usize,
    pub output_dim: usize,
    pub pooling: Pooling,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        let c = EncoderConfig::new(1);
        Self { channels: c.channels, depth: c.depth, kernel: c.kernel, output_dim: c.output_dim, pooling: c.pooling }
    }
}

impl EncoderSpec {
    pub fn config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            channels: self.channels,
            depth: self.depth,
            kernel: self.kernel,
            output_dim: self.output_dim,
            pooling: self.pooling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Policy learning rate; `lr` when unset.
    pub meta_lr: Option<f64>,
    /// Classifier-head learning rate; `lr` when unset.
    pub head_lr: Option<f64>,
    pub adam_betas: (f64, f64),
    pub alpha: f64,
    pub beta: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub mode: Mode,
    pub ablation: Ablation,
    pub seed: u64,
    pub pseudo_head: PseudoHead,
    pub head_input: HeadInput,
    pub view_mask: ViewMask,
    /// L2-normalise representations before every similarity.
    pub normalize: bool,
    /// Window length of the local loss; `max(T/8, 16)` when unset.
    pub subseq_len: Option<usize>,
    /// Random contiguous crop applied to longer batches.
    pub crop_len: Option<usize>,
    pub clip_norm: f64,
    pub checkpoint_every: Option<usize>,
    pub encoder: EncoderSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            meta_lr: None,
            head_lr: None,
            adam_betas: (0.9, 0.999),
            alpha: 0.5,
            beta: 0.5,
            tau_start: 2.0,
            tau_end: 0.1,
            mode: Mode::Unsupervised,
            ablation: Ablation::None,
            seed: 0,
            pseudo_head: PseudoHead::Similarity,
            head_input: HeadInput::View,
            view_mask: ViewMask::Source,
            normalize: false,
            subseq_len: None,
            crop_len: None,
            clip_norm: 5.0,
            checkpoint_every: None,
            encoder: EncoderSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.lr > 0.0) || [self.meta_lr, self.head_lr].iter().flatten().any(|&m| !(m > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.tau_end > 0.0) || self.tau_start < self.tau_end {
            return Err(Error::Config("need tau_start >= tau_end > 0".into()));
        }
        if self.subseq_len.is_some_and(|l| l < 2) || self.crop_len.is_some_and(|l| l < 2) {
            return Err(Error::Config("subseq_len and crop_len must be at least 2".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.encoder.config(1).validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn subseq_len_for(&self, t: usize) -> usize {
        self.subseq_len.unwrap_or((t / 8).max(16))
    }
}

/// Everything needed to resume training; random draws are derived from the
/// seed and the epoch counter, so no generator state is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub registry: Registry,
    pub encoder: Encoder,
    pub head: Option<ClassifierHead>,
    pub policy: PolicyState,
    pub encoder_opt: Adam,
    pub meta_opt: Adam,
    pub head_opt: Adam,
    pub epoch: usize,
    pub step: u64,
    pub clipped_steps: u64,
}

/// Weighted criteria of one batch and its logit gradient.
#[derive(Debug, Clone)]
pub struct CriteriaEval {
    pub l1out: f64,
    pub ce: f64,
    pub value: f64,
    pub logit_grad: Vec<f64>,
    pub zx: Array2<f64>,
    pub zv: Array2<f64>,
}

/// Losses of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub l_g: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub l1out: f64,
    pub ce: f64,
    pub criteria: f64,
    pub tau: f64,
}

impl StepRecord {
    fn new(step: u64, epoch: usize, batch: usize, r: &LossReport, tau: f64) -> Self {
        Self {
            step,
            epoch,
            batch,
            l_g: r.l_g,
            l_c: r.l_c,
            l_total: r.l_total,
            l1out: r.l1out,
            ce: r.ce,
            criteria: r.criteria,
            tau,
        }
    }

    pub fn report(&self) -> LossReport {
        LossReport {
            l_g: self.l_g,
            l_c: self.l_c,
            l_total: self.l_total,
            l1out: self.l1out,
            ce: self.ce,
            criteria: self.criteria,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub epoch: usize,
    pub transform: String,
    pub p: f64,
    pub normalized_weight: f64,
}

pub fn policy_records(epoch: usize, snap: &PolicySnapshot) -> Vec<PolicyRecord> {
    snap.names
        .iter()
        .zip(snap.p.iter().zip(&snap.normalized))
        .map(|(n, (&p, &w))| PolicyRecord { epoch, transform: n.clone(), p, normalized_weight: w })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EpochSummary {
    pub epoch: usize,
    pub tau: f64,
    pub mean: LossReport,
    pub steps: Vec<StepRecord>,
    pub policy: PolicySnapshot,
}

const TAG_EPOCH: u64 = 1;
const TAG_INIT: u64 = 2;

impl TrainState {
    pub fn new(config: TrainConfig, registry: &Registry, n_features: usize, num_classes: Option<usize>) -> Result<Self> {
        config.validate()?;
        let registry = config.ablation.effective_registry(registry)?;
        let root = RngStream::new(config.seed).derive(TAG_INIT);
        let encoder = Encoder::new(config.encoder.config(n_features), &mut root.derive(0).rng())?;
        let d = encoder.output_dim();
        let head = match config.mode {
            Mode::Supervised => {
                let c = num_classes.filter(|&c| c >= 2).ok_or_else(|| {
                    Error::Config("supervised mode needs a labelled dataset with at least two classes".into())
                })?;
                Some(ClassifierHead::new(d, c, &mut root.derive(1).rng()))
            }
            Mode::Unsupervised => match config.pseudo_head {
                PseudoHead::Affine => Some(ClassifierHead::new(d, config.batch_size, &mut root.derive(1).rng())),
                PseudoHead::Similarity => None,
            },
        };
        let betas = config.adam_betas;
        Ok(Self {
            policy: PolicyState::new(&registry, config.tau_start),
            encoder_opt: Adam::new(config.lr, betas),
            meta_opt: Adam::new(config.meta_lr.unwrap_or(config.lr), betas),
            head_opt: Adam::new(config.head_lr.unwrap_or(config.lr), betas),
            registry,
            encoder,
            head,
            config,
            epoch: 0,
            step: 0,
            clipped_steps: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn temperature_for(&self, epoch: usize) -> Result<f64> {
        let total = self.config.epochs.max(1);
        anneal_temperature(epoch.min(total - 1), total, self.config.tau_start, self.config.tau_end)
    }

    /// Gate values for one batch under the configured ablation.
    pub fn gates(&self, stream: RngStream) -> Result<GateSample> {
        let k = self.registry.len();
        let mut rng = stream.rng();
        match self.config.ablation {
            Ablation::None | Ablation::NoFidelity | Ablation::NoVariety => sample_gates(&self.policy, &mut rng),
            Ablation::Random => {
                let pick = rng.random_range(0..k);
                Ok(GateSample::fixed((0..k).map(|i| if i == pick { 1.0 } else { 0.0 }).collect()))
            }
            Ablation::All | Ablation::AllSequential | Ablation::Single(_) => Ok(GateSample::fixed(vec![1.0; k])),
        }
    }

    pub fn views(&self, x: &Array3<f64>, mask: &Array3<bool>, gates: &GateSample, stream: RngStream) -> Result<Views> {
        if self.config.ablation == Ablation::AllSequential {
            return Ok(sequential_views(x, mask, &self.registry, stream, self.config.view_mask));
        }
        build_views_masked(x, mask, &gates.a, &self.registry, stream, self.config.view_mask)
    }

    fn project(&self, z: Array2<f64>) -> (Array2<f64>, Option<Vec<f64>>) {
        if self.config.normalize {
            let (u, n) = normalize_rows(z.view());
            (u, Some(n))
        } else {
            (z, None)
        }
    }

    fn unproject(z: &Array2<f64>, norms: &Option<Vec<f64>>, dz: Array2<f64>) -> Array2<f64> {
        match norms {
            Some(n) => normalize_rows_backward(z.view(), n, dz.view()),
            None => dz,
        }
    }

    /// Contrastive update of the encoder; touches nothing else.
    /// Returns `(L_g, L_c)`.
    pub fn encoder_step(&mut self, x: &Array3<f64>, mask: &Array3<bool>, views: &Views) -> Result<(f64, f64)> {
        let enc = &self.encoder;
        let (zx, cx) = enc.forward(x, mask)?;
        let (zv, cv) = enc.forward(&views.values, &views.mask)?;
        let (zx, nx) = self.project(zx);
        let (zv, nv) = self.project(zv);
        let g = global_contrastive(zx.view(), zv.view())?;
        let mut grad = enc.zeros_like();
        enc.backward(&cx, Self::unproject(&zx, &nx, g.d_first).view(), &mut grad, false);
        enc.backward(&cv, Self::unproject(&zv, &nv, g.d_second).view(), &mut grad, false);
        let mut l_c = 0.0;
        if self.config.alpha > 0.0 {
            let len = self.config.subseq_len_for(x.dim().1);
            let sb = split_subsequences(&views.values, &views.mask, len)?;
            if sb.per_instance.iter().any(|&n| n >= 2) {
                let (zs, cs) = enc.forward(&sb.values, &sb.mask)?;
                let (zs, ns) = self.project(zs);
                let local = local_contrastive(zs.view(), &sb.per_instance)?;
                l_c = local.value;
                let dz = Self::unproject(&zs, &ns, local.grad * self.config.alpha);
                enc.backward(&cs, dz.view(), &mut grad, false);
            }
        }
        let norm = clip_grad_norm(grad.params_mut(), self.config.clip_norm);
        if norm > self.config.clip_norm {
            self.clipped_steps += 1;
            debug!("gradient norm {norm:.3} clipped to {}", self.config.clip_norm);
        }
        let grads = grad.params();
        self.encoder_opt.update(self.encoder.params_mut(), grads);
        Ok((g.value, l_c))
    }

    /// Criteria value of the views under the frozen encoder and head, with
    /// its gradient w.r.t. the policy logits for the given gate draw.
    pub fn criteria_gradient(
        &self,
        x: &Array3<f64>,
        mask: &Array3<bool>,
        labels: Option<&[usize]>,
        gates: &GateSample,
        views: &Views,
    ) -> Result<CriteriaEval> {
        let enc = &self.encoder;
        let (zx_raw, _) = enc.forward(x, mask)?;
        let (zv_raw, cv) = enc.forward(&views.values, &views.mask)?;
        let (zx, _) = self.project(zx_raw.clone());
        let (zv, nv) = self.project(zv_raw.clone());
        let l1 = l1out_variety(zx.view(), zv.view())?;
        let (ce, dce) = self.fidelity(zv.view(), zx.view(), labels)?;
        let w_var = if self.config.ablation == Ablation::NoVariety { 0.0 } else { 1.0 };
        let w_fid = if self.config.ablation == Ablation::NoFidelity { 0.0 } else { self.config.beta };
        if log::log_enabled!(log::Level::Trace) {
            for (name, d) in [("variety", &l1.d_second), ("fidelity", &dce)] {
                let d = Self::unproject(&zv, &nv, d.clone());
                let dv = enc.backward(&cv, d.view(), &mut enc.zeros_like(), true).expect("input gradient");
                log::trace!("{name} gate gradient {:?}", views.gate_grad(x, &dv));
            }
        }
        let dzv = Self::unproject(&zv, &nv, l1.d_second * w_var + dce * w_fid);
        let dv = enc.backward(&cv, dzv.view(), &mut enc.zeros_like(), true).expect("input gradient requested");
        Ok(CriteriaEval {
            l1out: l1.value,
            ce,
            value: w_var * l1.value + w_fid * ce,
            logit_grad: views.logit_grad(x, &dv, gates),
            zx: zx_raw,
            zv: zv_raw,
        })
    }

    /// Scores the current views with the criteria and, when the ablation
    /// trains the policy, updates the logits only. Returns `(L1Out, CE)` and
    /// the detached representations.
    pub fn meta_step(
        &mut self,
        x: &Array3<f64>,
        mask: &Array3<bool>,
        labels: Option<&[usize]>,
        gates: &GateSample,
        views: &Views,
    ) -> Result<(f64, f64, Array2<f64>, Array2<f64>)> {
        let eval = self.criteria_gradient(x, mask, labels, gates, views)?;
        if self.config.ablation.trains_policy() {
            self.meta_opt.update(vec![&mut self.policy.logits[..]], vec![&eval.logit_grad[..]]);
            self.policy.clamp();
        }
        Ok((eval.l1out, eval.ce, eval.zx, eval.zv))
    }

    /// Fidelity cross-entropy of the views and its gradient w.r.t. `z_v`.
    fn fidelity(&self, zv: ArrayView2<f64>, zx: ArrayView2<f64>, labels: Option<&[usize]>) -> Result<(f64, Array2<f64>)> {
        match (self.config.mode, &self.head) {
            (Mode::Supervised, Some(head)) => {
                let labels = labels.ok_or_else(|| Error::invalid("supervised batch without labels"))?;
                self.head_ce(head, zv, labels)
            }
            (Mode::Unsupervised, Some(head)) => {
                let ids: Vec<usize> = (0..zv.nrows()).collect();
                self.head_ce(head, zv, &ids)
            }
            (Mode::Unsupervised, None) => {
                let pl = fidelity_ce_pseudolabel(zv, zx)?;
                Ok((pl.value, pl.d_first))
            }
            (Mode::Supervised, None) => Err(Error::invalid("supervised mode without a classifier head")),
        }
    }

    fn head_ce(&self, head: &ClassifierHead, zv: ArrayView2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
        let logits = head.classify(zv)?;
        let (ce, dl) = fidelity_ce_supervised(logits.view(), targets)?;
        let mut scratch = ClassifierHead::zeros(head.linear.input_dim(), head.width());
        Ok((ce, head.backward(zv, dl.view(), &mut scratch)))
    }

    /// Cross-entropy update of the head on detached representations.
    pub fn classifier_step(&mut self, zx: &Array2<f64>, zv: &Array2<f64>, labels: Option<&[usize]>) -> Result<()> {
        let Some(head) = &self.head else { return Ok(()) };
        let mut targets: Vec<usize> = match (self.config.mode, labels) {
            (Mode::Supervised, Some(l)) => l.to_vec(),
            (Mode::Supervised, None) => return Err(Error::invalid("supervised batch without labels")),
            (Mode::Unsupervised, _) => (0..zv.nrows()).collect(),
        };
        let z = match self.config.head_input {
            HeadInput::View => zv.clone(),
            HeadInput::Original => zx.clone(),
            HeadInput::Both => {
                targets.extend_from_within(..);
                ndarray::concatenate(ndarray::Axis(0), &[zx.view(), zv.view()]).map_err(|e| Error::Shape(e.to_string()))?
            }
        };
        let (zv, _) = self.project(z);
        let logits = head.classify(zv.view())?;
        let (_, dl) = fidelity_ce_supervised(logits.view(), &targets)?;
        let mut grad = ClassifierHead::zeros(head.linear.input_dim(), head.width());
        head.backward(zv.view(), dl.view(), &mut grad);
        let head = self.head.as_mut().expect("checked above");
        self.head_opt.update(head.linear.params_mut(), grad.linear.params());
        Ok(())
    }

    pub fn train_epoch(&mut self, dataset: &Dataset) -> Result<EpochSummary> {
        if dataset.len() < 2 {
            return Err(Error::InsufficientInstances(dataset.len()));
        }
        if dataset.n_features() != self.encoder.config.input_dim {
            return Err(Error::Shape(format!(
                "dataset has F={}, encoder expects {}",
                dataset.n_features(),
                self.encoder.config.input_dim
            )));
        }
        let epoch = self.epoch;
        let tau = self.temperature_for(epoch)?;
        self.policy.temperature = tau;
        let estream = RngStream::new(self.config.seed).derive_path(&[TAG_EPOCH, epoch as u64]);
        let plan = batch_plan(dataset.len(), self.config.batch_size, true, estream.derive(0))?;
        let mut steps = Vec::with_capacity(plan.len());
        for (bi, idx) in plan.iter().enumerate() {
            let batch = Batch::from_dataset(dataset, idx, None)?;
            let bstream = estream.derive_path(&[1, bi as u64]);
            let (x, mask) = self.crop(&batch, bstream.derive(2));
            let gates = self.gates(bstream.derive(0))?;
            let views = self.views(&x, &mask, &gates, bstream.derive(1))?;
            let (l_g, l_c) = self.encoder_step(&x, &mask, &views)?;
            let labels = batch.labels.as_deref();
            let (l1, ce, zx, zv) = self.meta_step(&x, &mask, labels, &gates, &views)?;
            self.classifier_step(&zx, &zv, labels)?;
            let report = LossReport::new(l_g, l_c, self.config.alpha, l1, ce, self.config.beta);
            if !report.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("{report:?}; instances {:?}", batch.instance_ids),
                });
            }
            steps.push(StepRecord::new(self.step, epoch, bi, &report, tau));
            self.step += 1;
        }
        self.epoch += 1;
        let mean = mean_report(&steps);
        info!(
            "epoch {epoch}: L_total {:.4} criteria {:.4} tau {tau:.3} policy {:?}",
            mean.l_total,
            mean.criteria,
            self.policy.probabilities()
        );
        Ok(EpochSummary { epoch, tau, mean, steps, policy: self.policy.snapshot() })
    }

    fn crop(&self, batch: &Batch, stream: RngStream) -> (Array3<f64>, Array3<bool>) {
        let t = batch.len_t();
        match self.config.crop_len {
            Some(c) if c < t => {
                let off = stream.rng().random_range(0..=t - c);
                (
                    batch.values.slice(s![.., off..off + c, ..]).to_owned(),
                    batch.mask.slice(s![.., off..off + c, ..]).to_owned(),
                )
            }
            _ => (batch.values.clone(), batch.mask.clone()),
        }
    }
}

/// Composes every transform in registry order; transform `i` draws from
/// `stream.derive(i)`.
pub fn sequential_views(
    x: &Array3<f64>,
    mask: &Array3<bool>,
    registry: &Registry,
    stream: RngStream,
    view_mask: ViewMask,
) -> Views {
    let (mut v, mut m) = (x.clone(), mask.clone());
    for (i, t) in registry.transforms().iter().enumerate() {
        let (tv, tm) = apply_batch(t, &v, &m, stream.derive(i as u64));
        v = tv;
        if view_mask == ViewMask::Intersect {
            m = tm;
        }
    }
    Views { values: v, mask: m, transformed: Vec::new() }
}

pub fn mean_report(steps: &[StepRecord]) -> LossReport {
    let n = steps.len().max(1) as f64;
    let mut r = LossReport::default();
    for s in steps {
        r.l_g += s.l_g / n;
        r.l_c += s.l_c / n;
        r.l_total += s.l_total / n;
        r.l1out += s.l1out / n;
        r.ce += s.ce / n;
        r.criteria += s.criteria / n;
    }
    r
}

/// Training output: final state plus the per-step and per-epoch logs.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: TrainState,
    pub steps: Vec<StepRecord>,
    pub policy: Vec<PolicyRecord>,
    pub epochs: Vec<LossReport>,
}

pub fn fit(dataset: &Dataset, registry: &Registry, config: TrainConfig, out_dir: Option<&Path>) -> Result<FitOutput> {
    let state = TrainState::new(config, registry, dataset.n_features(), dataset.num_classes)?;
    resume(state, dataset, out_dir)
}

/// Continues training until `state.config.epochs`, checkpointing every
/// `checkpoint_every` epochs and writing logs into `out_dir`.
pub fn resume(mut state: TrainState, dataset: &Dataset, out_dir: Option<&Path>) -> Result<FitOutput> {
    let mut steps = Vec::new();
    let mut policy = policy_records(state.epoch, &state.policy.snapshot());
    let mut epochs = Vec::new();
    while state.epoch < state.config.epochs {
        let summary = state.train_epoch(dataset)?;
        policy.extend(policy_records(state.epoch, &summary.policy));
        epochs.push(summary.mean);
        steps.extend(summary.steps);
        if let (Some(dir), Some(k)) = (out_dir, state.config.checkpoint_every) {
            if k > 0 && state.epoch % k == 0 {
                state.save(&dir.join(format!("checkpoint_{:04}.json", state.epoch)))?;
            }
        }
    }
    if state.clipped_steps > 0 {
        info!("gradient clipping triggered on {} steps", state.clipped_steps);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        state.save(&dir.join("checkpoint.json"))?;
        write_csv(&dir.join("loss.csv"), &steps)?;
        write_csv(&dir.join("policy.csv"), &policy)?;
    }
    Ok(FitOutput { state, steps, policy, epochs })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::io(path, e.into()))).collect()
}
