//! Dense layers, activations, optimizers and the per-pixel feature trunk
//! shared by the denoiser and calibrator networks.
//!
//! Everything here runs in `f64` with explicit backward passes; there is no
//! autodiff. Batched products go through `ndarray`'s GEMM.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::image::{reflect_index, ImagePatch, SeededRng};

/// Fully connected layer storing its weight as `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Normal weights with variance `gain / inputs`, zero bias.
    pub fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut SeededRng) -> Self {
        let std = (gain / inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((inputs, outputs), |_| rng.normal() * std);
        Dense {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.accumulate(x, dy);
        dy.dot(&self.weight.t())
    }

    /// Adds `x^T dy` to the weight and column sums of `dy` to the bias.
    pub fn accumulate(&mut self, x: &Array2<f64>, dy: &Array2<f64>) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, &mut self.weight);
        self.bias += &dy.sum_axis(Axis(0));
    }

    pub fn slices(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Anything whose parameters are a fixed list of flat `f64` slices.
pub trait Parameterized {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Copies all parameters into one vector, in `param_slices` order.
    fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        assert_eq!(off, flat.len(), "parameter count mismatch");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate multiplier over the course of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from 1 to `final_fraction`.
    Cosine { final_fraction: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Cosine { final_fraction: 0.05 }
    }
}

impl LrSchedule {
    /// Multiplier for update `step` of `total` (0-based).
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { final_fraction } => {
                if total <= 1 {
                    return 1.0;
                }
                let progress = step as f64 / (total - 1) as f64;
                final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step<P: Parameterized>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.param_slices();
        let mut params = params.param_slices_mut();
        assert_eq!(params.len(), grads.len());
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads) {
                    for (p, g) in p.iter_mut().zip(g.iter()) {
                        *p -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.second = self.first.clone();
                }
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..p.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Side of the square neighbourhood fed to the trunk.
pub const WINDOW: usize = 3;
/// Inputs are shifted by this before entering the network.
pub const INPUT_CENTER: f64 = 0.5;

/// Gathers the reflect-padded `3 x 3` neighbourhood of every pixel into a
/// `pixels x (9 C)` matrix, ordered channel, row offset, column offset.
pub fn windows(img: &ImagePatch) -> Array2<f64> {
    let (c_n, h, w) = (img.channels(), img.height(), img.width());
    let r = (WINDOW / 2) as isize;
    let cols = c_n * WINDOW * WINDOW;
    let data = img.data();
    let mut out = Array2::zeros((h * w, cols));
    for y in 0..h {
        for x in 0..w {
            let mut row = out.row_mut(y * w + x);
            let mut k = 0;
            for c in 0..c_n {
                let base = c * h * w;
                for dy in -r..=r {
                    let yy = reflect_index(y as isize + dy, h);
                    for dx in -r..=r {
                        let xx = reflect_index(x as isize + dx, w);
                        row[k] = data[base + yy * w + xx] as f64 - INPUT_CENTER;
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

pub const TIME_EMBED_DIM: usize = 16;

/// Sinusoidal embedding of a step index: `sin(t f_i)` then `cos(t f_i)` for
/// `f_i = 10000^(-i / (dim / 2))`.
pub fn time_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        e[i] = a.sin();
        e[half + i] = a.cos();
    }
    e
}

/// Per-pixel feature extractor: a `3 x 3` window layer followed by one
/// hidden layer, both with SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTrunk {
    pub window: Dense,
    pub hidden: Dense,
}

/// Activations kept for the backward pass.
pub struct TrunkCache {
    pub input: Array2<f64>,
    pub pre1: Array2<f64>,
    pub act1: Array2<f64>,
    pub pre2: Array2<f64>,
    pub act2: Array2<f64>,
}

impl PixelTrunk {
    pub fn init(channels: usize, width1: usize, width2: usize, rng: &mut SeededRng) -> Self {
        PixelTrunk {
            window: Dense::init(channels * WINDOW * WINDOW, width1, 2.0, rng),
            hidden: Dense::init(width1, width2, 2.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PixelTrunk {
            window: Dense::zeros(self.window.inputs(), self.window.outputs()),
            hidden: Dense::zeros(self.hidden.inputs(), self.hidden.outputs()),
        }
    }

    pub fn channels(&self) -> usize {
        self.window.inputs() / (WINDOW * WINDOW)
    }

    pub fn widths(&self) -> (usize, usize) {
        (self.window.outputs(), self.hidden.outputs())
    }

    /// `extra_bias` is added to the first pre-activation of every pixel
    /// (used for the time embedding projection).
    pub fn forward(&self, input: Array2<f64>, extra_bias: Option<&Array1<f64>>) -> TrunkCache {
        let mut pre1 = self.window.forward(&input);
        if let Some(b) = extra_bias {
            pre1 += b;
        }
        let act1 = pre1.mapv(silu);
        let pre2 = self.hidden.forward(&act1);
        let act2 = pre2.mapv(silu);
        TrunkCache {
            input,
            pre1,
            act1,
            pre2,
            act2,
        }
    }

    /// Accumulates gradients and returns the column sums of `dL/dpre1`, which
    /// is the gradient with respect to `extra_bias`.
    pub fn backward(&self, cache: &TrunkCache, d_act2: Array2<f64>, grad: &mut PixelTrunk) -> Array1<f64> {
        let mut d_pre2 = d_act2;
        ndarray::Zip::from(&mut d_pre2)
            .and(&cache.pre2)
            .for_each(|d, &z| *d *= silu_grad(z));
        let mut d_pre1 = self.hidden.backward(&cache.act1, &d_pre2, &mut grad.hidden);
        ndarray::Zip::from(&mut d_pre1)
            .and(&cache.pre1)
            .for_each(|d, &z| *d *= silu_grad(z));
        grad.window.accumulate(&cache.input, &d_pre1);
        d_pre1.sum_axis(Axis(0))
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.window.slices().to_vec();
        v.extend(self.hidden.slices());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.window.slices_mut().into_iter().collect();
        v.extend(self.hidden.slices_mut());
        v
    }
}
