//! Representation network: a per-timestamp linear projection followed by a
//! stack of residual dilated convolution blocks and masked temporal pooling,
//! plus the affine classifier head.

use ndarray::{s, Array2, Array3, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, Conv1d, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Max over observed timestamps.
    #[default]
    Max,
    /// Mean over observed timestamps.
    Mean,
    /// Features of the last observed timestamp.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

fn default_channels() -> usize {
    64
}
fn default_depth() -> usize {
    10
}
fn default_kernel() -> usize {
    3
}
fn default_output_dim() -> usize {
    320
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            channels: default_channels(),
            depth: default_depth(),
            kernel: default_kernel(),
            output_dim: default_output_dim(),
            pooling: Pooling::Max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.channels == 0 || self.output_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if self.depth == 0 {
            return Err(Error::invalid("encoder depth must be at least 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("encoder kernel must be odd"));
        }
        Ok(())
    }

    /// Timestamps seen by one output position: one conv per block with
    /// dilation `2^i`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * ((1usize << self.depth) - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub conv: Conv1d,
    /// 1x1 projection on the residual path when the width changes.
    pub proj: Option<Linear>,
}

impl Block {
    fn zeros_like(&self) -> Self {
        Self { conv: self.conv.zeros_like(), proj: self.proj.as_ref().map(Linear::zeros_like) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    t_len: usize,
    x: Array2<f64>,
    time_mask: Vec<bool>,
    /// Input of every block (index 0 is the masked input projection).
    h: Vec<Array2<f64>>,
    /// GELU output feeding every block's convolution.
    g: Vec<Array2<f64>>,
    /// Column chosen per `(b, d)` for max / last pooling.
    picks: Vec<Option<usize>>,
    counts: Vec<usize>,
    pooling: Pooling,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let input = Linear::new(config.input_dim, c, rng);
        let blocks = (0..config.depth)
            .map(|i| {
                let out = if i + 1 == config.depth { config.output_dim } else { c };
                Block {
                    conv: Conv1d::new(c, out, config.kernel, 1 << i, rng),
                    proj: (out != c).then(|| Linear::new(c, out, rng)),
                }
            })
            .collect();
        Ok(Self { config, input, blocks })
    }

    /// Same architecture with every parameter zero; doubles as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            input: self.input.zeros_like(),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut v = self.input.params();
        for b in &self.blocks {
            v.extend(b.conv.params());
            if let Some(p) = &b.proj {
                v.extend(p.params());
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.input.params_mut();
        for b in &mut self.blocks {
            v.extend(b.conv.params_mut());
            if let Some(p) = &mut b.proj {
                v.extend(p.params_mut());
            }
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn forward(&self, values: &Array3<f64>, mask: &Array3<bool>) -> Result<(Array2<f64>, ForwardCache)> {
        self.forward_pooled(values, mask, self.config.pooling)
    }

    /// Encodes a `[B x T x F]` batch into `[B x D]` with explicit pooling.
    pub fn forward_pooled(
        &self,
        values: &Array3<f64>,
        mask: &Array3<bool>,
        pooling: Pooling,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let (b, t, f) = values.dim();
        if f != self.config.input_dim {
            return Err(Error::Shape(format!("encoder expects F={}, got F={f}", self.config.input_dim)));
        }
        if mask.dim() != values.dim() {
            return Err(Error::Shape("mask shape differs from values".into()));
        }
        let n = b * t;
        let mut x = Array2::zeros((f, n));
        let mut time_mask = vec![false; n];
        for bi in 0..b {
            for ti in 0..t {
                let col = bi * t + ti;
                for fi in 0..f {
                    x[[fi, col]] = values[[bi, ti, fi]];
                    time_mask[col] |= mask[[bi, ti, fi]];
                }
            }
        }
        let mut h0 = self.input.forward(x.view());
        apply_time_mask(&mut h0, &time_mask);
        let mut hs = Vec::with_capacity(self.blocks.len() + 1);
        let mut gs = Vec::with_capacity(self.blocks.len());
        hs.push(h0);
        for block in &self.blocks {
            let h = hs.last().expect("non-empty");
            let g = h.mapv(gelu);
            let mut next = block.conv.forward(g.view(), t);
            match &block.proj {
                Some(p) => next += &p.forward(h.view()),
                None => next += h,
            }
            apply_time_mask(&mut next, &time_mask);
            gs.push(g);
            hs.push(next);
        }
        let out = hs.last().expect("non-empty");
        let d = out.nrows();
        let mut z = Array2::zeros((b, d));
        let mut picks = vec![None; b * d];
        let mut counts = vec![0; b];
        for bi in 0..b {
            let cols: Vec<usize> = (bi * t..(bi + 1) * t).filter(|&c| time_mask[c]).collect();
            counts[bi] = cols.len();
            if cols.is_empty() {
                continue;
            }
            for di in 0..d {
                let row = out.row(di);
                match pooling {
                    Pooling::Max => {
                        let best = cols
                            .iter()
                            .copied()
                            .fold(cols[0], |best, c| if row[c] > row[best] { c } else { best });
                        z[[bi, di]] = row[best];
                        picks[bi * d + di] = Some(best);
                    }
                    Pooling::Last => {
                        let last = *cols.last().expect("non-empty");
                        z[[bi, di]] = row[last];
                        picks[bi * d + di] = Some(last);
                    }
                    Pooling::Mean => {
                        z[[bi, di]] = cols.iter().map(|&c| row[c]).sum::<f64>() / cols.len() as f64;
                    }
                }
            }
        }
        hs.pop();
        let cache = ForwardCache { batch: b, t_len: t, x, time_mask, h: hs, g: gs, picks, counts, pooling };
        Ok((z, cache))
    }

    /// Inference-only encoding in chunks of `chunk` instances.
    pub fn encode(&self, values: &Array3<f64>, mask: &Array3<bool>, pooling: Pooling, chunk: usize) -> Result<Array2<f64>> {
        let b = values.dim().0;
        let chunk = chunk.max(1);
        let mut z = Array2::zeros((b, self.output_dim()));
        let mut start = 0;
        while start < b {
            let end = (start + chunk).min(b);
            let v = values.slice(s![start..end, .., ..]).to_owned();
            let m = mask.slice(s![start..end, .., ..]).to_owned();
            let (zc, _) = self.forward_pooled(&v, &m, pooling)?;
            z.slice_mut(s![start..end, ..]).assign(&zc);
            start = end;
        }
        Ok(z)
    }

    /// Back-propagates `dL/dz` (`[B x D]`), accumulating parameter gradients
    /// into `grad`. Returns `dL/dvalues` (`[B x T x F]`) when requested.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dz: ArrayView2<f64>,
        grad: &mut Encoder,
        want_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (b, t) = (cache.batch, cache.t_len);
        let n = b * t;
        let d = self.output_dim();
        let mut dh = Array2::zeros((d, n));
        for bi in 0..b {
            for di in 0..d {
                let g = dz[[bi, di]];
                match cache.pooling {
                    Pooling::Max | Pooling::Last => {
                        if let Some(c) = cache.picks[bi * d + di] {
                            dh[[di, c]] += g;
                        }
                    }
                    Pooling::Mean => {
                        let cnt = cache.counts[bi];
                        if cnt > 0 {
                            let share = g / cnt as f64;
                            for c in bi * t..(bi + 1) * t {
                                if cache.time_mask[c] {
                                    dh[[di, c]] += share;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (i, block) in self.blocks.iter().enumerate().rev() {
            apply_time_mask(&mut dh, &cache.time_mask);
            let h = &cache.h[i];
            let g = &cache.g[i];
            let gb = &mut grad.blocks[i];
            let dg = block.conv.backward(g.view(), t, dh.view(), &mut gb.conv);
            let mut dprev = match (&block.proj, &mut gb.proj) {
                (Some(p), Some(gp)) => p.backward(h.view(), dh.view(), gp),
                _ => dh,
            };
            Zip::from(&mut dprev).and(&dg).and(h).for_each(|dp, &dgi, &hi| *dp += dgi * gelu_grad(hi));
            dh = dprev;
        }
        apply_time_mask(&mut dh, &cache.time_mask);
        let dx = self.input.backward(cache.x.view(), dh.view(), &mut grad.input);
        want_input_grad.then(|| {
            let f = self.config.input_dim;
            Array3::from_shape_fn((b, t, f), |(bi, ti, fi)| dx[[fi, bi * t + ti]])
        })
    }
}

fn apply_time_mask(h: &mut Array2<f64>, time_mask: &[bool]) {
    if time_mask.iter().all(|&m| m) {
        return;
    }
    for mut row in h.rows_mut() {
        for (v, &m) in row.iter_mut().zip(time_mask) {
            if !m {
                *v = 0.0;
            }
        }
    }
}

/// Non-overlapping length-`len` windows over the observed span of each
/// instance, stacked into one batch. `owner[k]` is the source instance of
/// window `k`; windows of one instance are consecutive and in time order.
#[derive(Debug, Clone)]
pub struct SubsequenceBatch {
    pub values: Array3<f64>,
    pub mask: Array3<bool>,
    pub owner: Vec<usize>,
    pub per_instance: Vec<usize>,
}

pub fn split_subsequences(values: &Array3<f64>, mask: &Array3<bool>, len: usize) -> Result<SubsequenceBatch> {
    if len < 2 {
        return Err(Error::invalid("subsequence length must be at least 2"));
    }
    let (b, t, f) = values.dim();
    let mut spans = Vec::with_capacity(b);
    for bi in 0..b {
        let obs: Vec<usize> = (0..t).filter(|&ti| (0..f).any(|fi| mask[[bi, ti, fi]])).collect();
        let (first, last) = match (obs.first(), obs.last()) {
            (Some(&a), Some(&z)) => (a, z + 1),
            _ => (0, 0),
        };
        spans.push((first, (last - first) / len));
    }
    let total: usize = spans.iter().map(|s| s.1).sum();
    let mut sv = Array3::zeros((total, len, f));
    let mut sm = Array3::from_elem((total, len, f), false);
    let mut owner = Vec::with_capacity(total);
    let mut k = 0;
    for (bi, &(first, count)) in spans.iter().enumerate() {
        for w in 0..count {
            let a = first + w * len;
            sv.slice_mut(s![k, .., ..]).assign(&values.slice(s![bi, a..a + len, ..]));
            sm.slice_mut(s![k, .., ..]).assign(&mask.slice(s![bi, a..a + len, ..]));
            owner.push(bi);
            k += 1;
        }
    }
    Ok(SubsequenceBatch { values: sv, mask: sm, owner, per_instance: spans.iter().map(|s| s.1).collect() })
}

/// Affine classifier `logits = z W^T + b` on `[B x D]` representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(dim, classes, rng) }
    }

    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self { linear: Linear::zeros(dim, classes) }
    }

    pub fn width(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn classify(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.linear.input_dim() {
            return Err(Error::Shape(format!(
                "head expects D={}, got D={}",
                self.linear.input_dim(),
                z.ncols()
            )));
        }
        Ok(self.linear.forward(z.t()).reversed_axes())
    }

    /// Returns `dL/dz` and accumulates head gradients.
    pub fn backward(&self, z: ArrayView2<f64>, dlogits: ArrayView2<f64>, grad: &mut ClassifierHead) -> Array2<f64> {
        self.linear.backward(z.t(), dlogits.t(), &mut grad.linear).reversed_axes()
    }
}
