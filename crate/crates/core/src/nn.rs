//! Minimal dense layers with explicit backward passes.
//!
//! Activations are channel-major matrices `[C x N]` where column
//! `b * T + t` holds timestamp `t` of instance `b`. Convolutions lower to one
//! GEMM over the whole batch via im2col.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Standard uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// `y = W x + b` on channel-major activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let weight = uniform_init(output, input, input, rng);
        let bound = 1.0 / (input as f64).sqrt();
        let bias = Array1::from_shape_simple_fn(output, || rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((self.output_dim(), x.ncols()));
        general_mat_mul(1.0, &self.weight, &x, 0.0, &mut y);
        y += &self.bias.view().insert_axis(Axis(1));
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &dy, &x.t(), 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(1));
        let mut dx = Array2::zeros((self.input_dim(), dy.ncols()));
        general_mat_mul(1.0, &self.weight.t(), &dy, 0.0, &mut dx);
        dx
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice().expect("standard layout"), self.bias.as_slice().expect("standard layout")]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Dilated 1-D convolution with "same" zero padding, applied independently
/// to each length-`T` segment of the columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    /// `[out x (in * kernel)]`, row-major over `(in, tap)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, kernel: usize, dilation: usize, rng: &mut R) -> Self {
        let fan_in = input * kernel;
        let weight = uniform_init(output, fan_in, fan_in, rng);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let bias = Array1::from_shape_simple_fn(output, || rng.random_range(-bound..bound));
        Self { weight, bias, in_channels: input, kernel, dilation }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            ..*self
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn offsets(&self) -> impl Iterator<Item = isize> + '_ {
        let pad = (self.dilation * (self.kernel - 1) / 2) as isize;
        (0..self.kernel).map(move |j| (j * self.dilation) as isize - pad)
    }

    fn im2col(&self, x: ArrayView2<f64>, t_len: usize) -> Array2<f64> {
        let n = x.ncols();
        let mut cols = Array2::zeros((self.in_channels * self.kernel, n));
        let offsets: Vec<isize> = self.offsets().collect();
        for c in 0..self.in_channels {
            let src = x.row(c);
            let src = src.as_slice().expect("contiguous rows");
            for (j, &off) in offsets.iter().enumerate() {
                let mut dst = cols.row_mut(c * self.kernel + j);
                let dst = dst.as_slice_mut().expect("contiguous rows");
                for seg in (0..n).step_by(t_len) {
                    let (lo, hi) = valid_range(off, t_len);
                    if lo < hi {
                        let s0 = (seg as isize + lo as isize + off) as usize;
                        dst[seg + lo..seg + hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, t_len: usize) -> Array2<f64> {
        let n = dcols.ncols();
        let mut dx = Array2::zeros((self.in_channels, n));
        let offsets: Vec<isize> = self.offsets().collect();
        for c in 0..self.in_channels {
            let mut dst = dx.row_mut(c);
            let dst = dst.as_slice_mut().expect("contiguous rows");
            for (j, &off) in offsets.iter().enumerate() {
                let src = dcols.row(c * self.kernel + j);
                let src = src.as_slice().expect("contiguous rows");
                for seg in (0..n).step_by(t_len) {
                    let (lo, hi) = valid_range(off, t_len);
                    for t in lo..hi {
                        dst[(seg as isize + t as isize + off) as usize] += src[seg + t];
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: ArrayView2<f64>, t_len: usize) -> Array2<f64> {
        let cols = self.im2col(x, t_len);
        let mut y = Array2::zeros((self.output_dim(), x.ncols()));
        general_mat_mul(1.0, &self.weight, &cols, 0.0, &mut y);
        y += &self.bias.view().insert_axis(Axis(1));
        y
    }

    pub fn backward(&self, x: ArrayView2<f64>, t_len: usize, dy: ArrayView2<f64>, grad: &mut Conv1d) -> Array2<f64> {
        let cols = self.im2col(x, t_len);
        general_mat_mul(1.0, &dy, &cols.t(), 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(1));
        let mut dcols = Array2::zeros(cols.raw_dim());
        general_mat_mul(1.0, &self.weight.t(), &dy, 0.0, &mut dcols);
        self.col2im(&dcols, t_len)
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice().expect("standard layout"), self.bias.as_slice().expect("standard layout")]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Output positions `t` with `0 <= t + off < t_len`.
fn valid_range(off: isize, t_len: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (t_len as isize - off).clamp(0, t_len as isize) as usize;
    (lo.min(hi), hi)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adam with bias correction over a flat parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self { lr, beta1: betas.0, beta2: betas.1, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update. `params` and `grads` must list the same tensors in the
    /// same order on every call.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        let total: usize = grads.iter().map(|g| g.len()).sum();
        if self.m.len() != total {
            self.m = vec![0.0; total];
            self.v = vec![0.0; total];
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut k = 0;
        for (p, g) in params.into_iter().zip(grads) {
            assert_eq!(p.len(), g.len(), "parameter/gradient length mismatch");
            for (pi, &gi) in p.iter_mut().zip(g) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

/// Rescales gradients to global L2 norm `max_norm` when it is exceeded.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: Vec<&mut [f64]>, max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct (non-im2col) dilated convolution.
    fn conv_naive(conv: &Conv1d, x: &Array2<f64>, t_len: usize) -> Array2<f64> {
        let n = x.ncols();
        let pad = (conv.dilation * (conv.kernel - 1) / 2) as isize;
        Array2::from_shape_fn((conv.output_dim(), n), |(o, col)| {
            let seg = col / t_len * t_len;
            let t = (col % t_len) as isize;
            let mut acc = conv.bias[o];
            for c in 0..conv.in_channels {
                for j in 0..conv.kernel {
                    let src = t + (j * conv.dilation) as isize - pad;
                    if (0..t_len as isize).contains(&src) {
                        acc += conv.weight[[o, c * conv.kernel + j]] * x[[c, seg + src as usize]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for dilation in [1, 2, 4, 16] {
            let conv = Conv1d::new(3, 5, 3, dilation, &mut rng);
            let x = Array2::from_shape_simple_fn((3, 2 * 11), || rng.random_range(-1.0..1.0));
            let a = conv.forward(x.view(), 11);
            let b = conv_naive(&conv, &x, 11);
            assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d::new(2, 3, 3, 2, &mut rng);
        let x = Array2::from_shape_simple_fn((2, 14), || rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_simple_fn((3, 14), || rng.random_range(-1.0..1.0));
        let loss = |c: &Conv1d, x: &Array2<f64>| (c.forward(x.view(), 7) * &w).sum();
        let mut g = conv.zeros_like();
        let dx = conv.backward(x.view(), 7, w.view(), &mut g);
        let h = 1e-6;
        for idx in [(0, 0), (1, 5), (0, 13)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        for idx in [(0, 0), (2, 5)] {
            let mut cp = conv.clone();
            cp.weight[idx] += h;
            let mut cm = conv.clone();
            cm.weight[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - g.weight[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(4, 3, &mut rng);
        let x = Array2::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_simple_fn((3, 5), || rng.random_range(-1.0..1.0));
        let mut g = lin.zeros_like();
        let dx = lin.backward(x.view(), w.view(), &mut g);
        let loss = |l: &Linear, x: &Array2<f64>| (l.forward(x.view()) * &w).sum();
        let h = 1e-6;
        let mut xp = x.clone();
        xp[(2, 3)] += h;
        let mut xm = x.clone();
        xm[(2, 3)] -= h;
        assert!(((loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h) - dx[(2, 3)]).abs() < 1e-7);
        let mut lp = lin.clone();
        lp.bias[1] += h;
        let mut lm = lin.clone();
        lm.bias[1] -= h;
        assert!(((loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h) - g.bias[1]).abs() < 1e-7);
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let mut opt = Adam::new(0.001, (0.9, 0.999));
        opt.update(vec![&mut p[..]], vec![&[0.5, -2.0][..]]);
        assert!((p[0] - (1.0 - 0.001)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 0.001)).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        let n = clip_grad_norm(vec![&mut g[..]], 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
