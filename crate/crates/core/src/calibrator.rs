//! Step calibrators: map a degraded image to the number of reverse steps it
//! still needs.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::denoiser::{permutation, TrainReport};
use crate::diffusion::{q_sample, two_region_corrupt};
use crate::error::{param_err, Error, Result};
use crate::image::{ImagePatch, MaskKind, RegionMask, SeededRng};
use crate::nn::{windows, Dense, LrSchedule, Optimizer, OptimizerKind, Parameterized, PixelTrunk};
use crate::schedule::{NoiseSchedule, ScheduleSpec};

/// Rounds a continuous prediction to the nearest step and clamps it to
/// `0..=max_step`. NaN maps to 0.
pub fn round_and_clamp(raw: f64, max_step: usize) -> usize {
    if raw.is_nan() || raw <= 0.0 {
        return 0;
    }
    let r = raw.round();
    if r >= max_step as f64 {
        max_step
    } else {
        r as usize
    }
}

pub trait StepCalibrator: Send + Sync {
    /// Unrounded, unclamped step estimate.
    fn raw_predict(&self, x: &ImagePatch) -> Result<f64>;

    /// Upper bound `T'` on returned steps.
    fn max_step(&self) -> usize;

    fn predict_t(&self, x: &ImagePatch) -> Result<usize> {
        x.ensure_finite()?;
        Ok(round_and_clamp(self.raw_predict(x)?, self.max_step()))
    }
}

/// Returns a stored step for every image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleCalibrator {
    pub t: usize,
    pub max_step: usize,
}

impl OracleCalibrator {
    pub fn new(t: usize, max_step: usize) -> Self {
        OracleCalibrator { t, max_step }
    }
}

impl StepCalibrator for OracleCalibrator {
    fn raw_predict(&self, _x: &ImagePatch) -> Result<f64> {
        Ok(self.t as f64)
    }

    fn max_step(&self) -> usize {
        self.max_step
    }
}

pub const DEFAULT_PATCH: usize = 7;
const PCA_MAX_ITERS: usize = 10;
const PCA_REL_TOL: f64 = 1e-3;

/// Blind noise standard deviation from the eigenvalues of the covariance of
/// all overlapping `p x p` patches.
///
/// Signal energy concentrates in a few large eigenvalues, while white noise
/// spreads evenly over all of them. Starting from the mean eigenvalue, the
/// estimator repeatedly discards eigenvalues above the upper edge of the
/// noise-only eigenvalue spread (Marchenko-Pastur edge for the patch count)
/// and re-averages the rest, until the mean changes by less than 1e-3
/// (relative) or ten passes have run.
pub fn estimate_sigma_pca(x: &ImagePatch, p: usize) -> Result<f64> {
    if p < 3 || p % 2 == 0 {
        return Err(param_err!("patch size must be odd and at least 3, got {p}"));
    }
    if x.height() < 2 * p || x.width() < 2 * p {
        return Err(param_err!(
            "image {} too small for {p}x{p} patches (needs at least {}x{})",
            x.shape(),
            2 * p,
            2 * p
        ));
    }
    x.ensure_finite()?;
    let (c_n, h, w) = (x.channels(), x.height(), x.width());
    let dim = c_n * p * p;
    let rows = (h - p + 1) * (w - p + 1);
    let data = x.data();
    let mut patches = Array2::<f64>::zeros((rows, dim));
    let mut r = 0;
    for y in 0..=h - p {
        for xx in 0..=w - p {
            let mut row = patches.row_mut(r);
            let mut k = 0;
            for c in 0..c_n {
                for dy in 0..p {
                    let base = (c * h + y + dy) * w + xx;
                    for dx in 0..p {
                        row[k] = data[base + dx] as f64;
                        k += 1;
                    }
                }
            }
            r += 1;
        }
    }
    let mean = patches.mean_axis(Axis(0)).expect("non-empty");
    patches -= &mean;
    let cov = patches.t().dot(&patches) / rows as f64;
    let cov = DMatrix::from_fn(dim, dim, |i, j| cov[[i, j]]);
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let edge = (1.0 + (dim as f64 / rows as f64).sqrt()).powi(2);
    let mut tau = eig.iter().sum::<f64>() / dim as f64;
    for _ in 0..PCA_MAX_ITERS {
        if tau <= 0.0 {
            return Ok(0.0);
        }
        let limit = tau * edge;
        let kept: Vec<f64> = eig.iter().copied().take_while(|&v| v <= limit).collect();
        let next = if kept.is_empty() {
            eig[0]
        } else {
            kept.iter().sum::<f64>() / kept.len() as f64
        };
        let change = (next - tau).abs() / tau;
        tau = next;
        if change < PCA_REL_TOL {
            break;
        }
    }
    Ok(tau.max(0.0).sqrt())
}

/// Calibrates through the PCA noise estimate and the schedule's
/// closest cumulative noise level.
#[derive(Debug, Clone)]
pub struct NonparametricCalibrator {
    patch: usize,
    schedule: NoiseSchedule,
    max_step: usize,
}

impl NonparametricCalibrator {
    pub fn new(schedule: NoiseSchedule, patch: usize, max_step: usize) -> Result<Self> {
        if patch < 3 || patch % 2 == 0 {
            return Err(param_err!("patch size must be odd and at least 3, got {patch}"));
        }
        Ok(NonparametricCalibrator {
            patch,
            schedule,
            max_step,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }
}

impl StepCalibrator for NonparametricCalibrator {
    fn raw_predict(&self, x: &ImagePatch) -> Result<f64> {
        let sigma = estimate_sigma_pca(x, self.patch)?;
        Ok(self.schedule.nearest_step(sigma) as f64)
    }

    fn max_step(&self) -> usize {
        self.max_step
    }
}

/// Network outputs are in units of this many steps.
pub const STEP_SCALE: f64 = 100.0;
pub const HEAD_WIDTH: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibratorArch {
    pub channels: usize,
    pub width1: usize,
    pub width2: usize,
    pub head_width: usize,
}

impl Default for CalibratorArch {
    fn default() -> Self {
        CalibratorArch {
            channels: 1,
            width1: 64,
            width2: 64,
            head_width: HEAD_WIDTH,
        }
    }
}

/// Per-pixel trunk, global average pooling, and a two-layer ReLU head
/// regressing the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralStepCalibrator {
    pub trunk: PixelTrunk,
    pub head1: Dense,
    pub head2: Dense,
    pub max_step: usize,
    pub schedule: ScheduleSpec,
}

impl Parameterized for NeuralStepCalibrator {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.slices();
        v.extend(self.head1.slices());
        v.extend(self.head2.slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.slices_mut();
        v.extend(self.head1.slices_mut());
        v.extend(self.head2.slices_mut());
        v
    }
}

struct CalibForward {
    trunk: crate::nn::TrunkCache,
    pooled: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    out: f64,
}

impl NeuralStepCalibrator {
    pub fn new(arch: CalibratorArch, max_step: usize, schedule: ScheduleSpec, rng: &mut SeededRng) -> Self {
        NeuralStepCalibrator {
            trunk: PixelTrunk::init(arch.channels, arch.width1, arch.width2, rng),
            head1: Dense::init(arch.width2, arch.head_width, 2.0, rng),
            head2: Dense::init(arch.head_width, 1, 1.0, rng),
            max_step,
            schedule,
        }
    }

    pub fn arch(&self) -> CalibratorArch {
        let (width1, width2) = self.trunk.widths();
        CalibratorArch {
            channels: self.trunk.channels(),
            width1,
            width2,
            head_width: self.head1.outputs(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        NeuralStepCalibrator {
            trunk: self.trunk.zeros_like(),
            head1: Dense::zeros(self.head1.inputs(), self.head1.outputs()),
            head2: Dense::zeros(self.head2.inputs(), self.head2.outputs()),
            max_step: self.max_step,
            schedule: self.schedule,
        }
    }

    fn forward(&self, x: &ImagePatch) -> Result<CalibForward> {
        if x.channels() != self.trunk.channels() {
            return Err(Error::Contract(format!(
                "calibrator expects {} channels, got {}",
                self.trunk.channels(),
                x.channels()
            )));
        }
        let trunk = self.trunk.forward(windows(x), None);
        let pooled = trunk.act2.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let pre = self.head1.forward(&pooled);
        let act = pre.mapv(|v| v.max(0.0));
        let out = self.head2.forward(&act)[[0, 0]];
        Ok(CalibForward {
            trunk,
            pooled,
            pre,
            act,
            out,
        })
    }

    /// Squared error `(t - S(x))^2` in steps^2; accumulates
    /// `scale * dL/dtheta` (of the loss in `STEP_SCALE` units) into `grad`.
    pub fn loss(&self, x: &ImagePatch, t: f64, grad: Option<(&mut NeuralStepCalibrator, f64)>) -> Result<f64> {
        let f = self.forward(x)?;
        let target = t / STEP_SCALE;
        let diff = f.out - target;
        if let Some((g, scale)) = grad {
            let d_out = Array2::from_elem((1, 1), 2.0 * diff * scale);
            let mut d_act = self.head2.backward(&f.act, &d_out, &mut g.head2);
            ndarray::Zip::from(&mut d_act)
                .and(&f.pre)
                .for_each(|d, &z| *d *= (z > 0.0) as i32 as f64);
            let d_pooled = self.head1.backward(&f.pooled, &d_act, &mut g.head1);
            let pixels = f.trunk.act2.nrows();
            let row: Array1<f64> = d_pooled.row(0).mapv(|v| v / pixels as f64);
            let d_act2 = row
                .broadcast((pixels, row.len()))
                .expect("broadcast")
                .to_owned();
            self.trunk.backward(&f.trunk, d_act2, &mut g.trunk);
        }
        Ok((diff * STEP_SCALE).powi(2))
    }
}

impl StepCalibrator for NeuralStepCalibrator {
    fn raw_predict(&self, x: &ImagePatch) -> Result<f64> {
        Ok(self.forward(x)?.out * STEP_SCALE)
    }

    fn max_step(&self) -> usize {
        self.max_step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibratorTrainConfig {
    /// Largest corruption step drawn during training.
    pub t_max: usize,
    /// Two-region augmentation on every draw.
    pub augment: bool,
    pub mask: MaskKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
}

impl Default for CalibratorTrainConfig {
    fn default() -> Self {
        CalibratorTrainConfig {
            t_max: 200,
            augment: true,
            mask: MaskKind::HalfPlane,
            epochs: 30,
            lr: 1e-3,
            batch_size: 4,
            optimizer: OptimizerKind::default(),
            lr_schedule: LrSchedule::default(),
        }
    }
}

/// Trains the calibrator to regress the (larger) corruption step.
///
/// Every draw picks a clean image and `t` in `1..=t_max`. With augmentation,
/// a second step `t'` in `1..=t` and a random region mask are drawn; the
/// masked region is corrupted to `t` and the rest to `t'`, and the target
/// stays `t`.
pub fn train_calibrator(
    model: &mut NeuralStepCalibrator,
    corpus: &[ImagePatch],
    schedule: &NoiseSchedule,
    cfg: &CalibratorTrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(param_err!("training corpus is empty"));
    }
    if cfg.t_max == 0 || cfg.t_max > schedule.steps() {
        return Err(param_err!("calibrator t_max {} outside 1..={}", cfg.t_max, schedule.steps()));
    }
    if cfg.batch_size == 0 {
        return Err(param_err!("batch size must be positive"));
    }
    let mut report = TrainReport::new(cfg.t_max);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let scale = 1.0 / cfg.batch_size as f64;
    let total_updates = cfg.epochs * corpus.len().div_ceil(cfg.batch_size);
    let mut update = 0;
    for epoch in 0..cfg.epochs {
        let order = permutation(corpus.len(), rng);
        let mut total = 0.0;
        for (i, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = model.zeros_like();
            for &idx in batch {
                let x0 = &corpus[idx];
                let t = rng.range_inclusive(1, cfg.t_max);
                report.steps_seen[t] += 1;
                let x = if cfg.augment {
                    let t_prime = rng.range_inclusive(1, t);
                    let mask = RegionMask::random(cfg.mask, x0.height(), x0.width(), rng)?;
                    two_region_corrupt(x0, t, t_prime, &mask, schedule, rng)?
                } else {
                    q_sample(x0, t, schedule, rng)?.0
                };
                let loss = model.loss(&x, t as f64, Some((&mut grad, scale)))?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "calibrator loss became {loss} at epoch {epoch}, batch {i}, t = {t}"
                    )));
                }
                total += loss;
            }
            opt.set_lr(cfg.lr * cfg.lr_schedule.factor(update, total_updates));
            opt.step(model, &grad);
            update += 1;
        }
        report.epoch_losses.push(total / corpus.len() as f64);
    }
    report.final_loss = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok(report)
}

/// Mean absolute error of `predict_t` against ground-truth steps.
pub fn mean_absolute_error(c: &dyn StepCalibrator, items: &[(ImagePatch, usize)]) -> Result<f64> {
    if items.is_empty() {
        return Err(param_err!("no items to evaluate"));
    }
    let mut total = 0.0;
    for (x, t) in items {
        total += (c.predict_t(x)? as f64 - *t as f64).abs();
    }
    Ok(total / items.len() as f64)
}

/// Mean of `predict_t` over images.
pub fn mean_prediction(c: &dyn StepCalibrator, images: &[ImagePatch]) -> Result<f64> {
    if images.is_empty() {
        return Err(param_err!("no images to evaluate"));
    }
    let mut total = 0.0;
    for x in images {
        total += c.predict_t(x)? as f64;
    }
    Ok(total / images.len() as f64)
}
