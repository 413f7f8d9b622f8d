//! Noise predictors.
//!
//! [`AnalyticGmDenoiser`] computes the exact posterior-mean noise
//! `E[eps | x_t]` for an i.i.d. per-pixel Gaussian-mixture prior and serves as
//! the oracle for everything else. [`TinyDenoiser`] is a small per-pixel
//! network trained only on steps `1..=T'`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::image::{ImagePatch, SeededRng};
use crate::nn::{time_embedding, windows, Dense, LrSchedule, Optimizer, OptimizerKind, Parameterized, PixelTrunk, TIME_EMBED_DIM};
use crate::schedule::{NoiseSchedule, ScheduleSpec};

/// An epsilon-predictor `eps_hat(x_t, t)`. Output shape equals input shape.
pub trait Denoiser: Send + Sync {
    fn predict(&self, x_t: &ImagePatch, t: usize) -> Result<ImagePatch>;
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(&self, x_t: &ImagePatch, _t: usize) -> Result<ImagePatch> {
        Ok(ImagePatch::zeros(x_t.shape()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub var: f64,
}

/// One-dimensional Gaussian mixture used as an i.i.d. per-pixel prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixtureComponent>", into = "Vec<MixtureComponent>")]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
}

impl TryFrom<Vec<MixtureComponent>> for GaussianMixture {
    type Error = Error;
    fn try_from(c: Vec<MixtureComponent>) -> Result<Self> {
        GaussianMixture::new(c)
    }
}

impl From<GaussianMixture> for Vec<MixtureComponent> {
    fn from(m: GaussianMixture) -> Self {
        m.components
    }
}

impl GaussianMixture {
    /// Weights must be positive and sum to one (within 1e-6; they are then
    /// renormalized exactly); variances must be positive.
    pub fn new(mut components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(param_err!("mixture needs at least one component"));
        }
        for c in &components {
            if !(c.weight > 0.0) || !(c.var > 0.0) || !c.mean.is_finite() || !c.var.is_finite() {
                return Err(param_err!("invalid mixture component {c:?}"));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(param_err!("mixture weights sum to {total}, expected 1"));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Ok(GaussianMixture { components })
    }

    pub fn single(mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent { weight: 1.0, mean, var }])
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.components
            .iter()
            .map(|c| c.weight * (c.var + (c.mean - m).powi(2)))
            .sum()
    }

    pub fn sample(&self, rng: &mut SeededRng) -> f64 {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut chosen = self.components.last().unwrap();
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        chosen.mean + chosen.var.sqrt() * rng.normal()
    }

    /// Posterior mean `E[x0 | x_t = x]` when `x_t = sqrt(a) x0 + sqrt(1 - a) eps`.
    pub fn posterior_mean(&self, x: f64, a: f64) -> f64 {
        let sa = a.sqrt();
        let mut best = f64::NEG_INFINITY;
        let mut logs = [0.0f64; 8];
        let mut heap;
        let logs: &mut [f64] = if self.components.len() <= logs.len() {
            &mut logs[..self.components.len()]
        } else {
            heap = vec![0.0; self.components.len()];
            &mut heap
        };
        for (l, c) in logs.iter_mut().zip(&self.components) {
            let s2 = a * c.var + (1.0 - a);
            let d = x - sa * c.mean;
            *l = c.weight.ln() - 0.5 * s2.ln() - d * d / (2.0 * s2);
            best = best.max(*l);
        }
        let mut norm = 0.0;
        let mut acc = 0.0;
        for (l, c) in logs.iter().zip(&self.components) {
            let r = (l - best).exp();
            let s2 = a * c.var + (1.0 - a);
            let cond = c.mean + sa * c.var / s2 * (x - sa * c.mean);
            norm += r;
            acc += r * cond;
        }
        acc / norm
    }
}

/// Exact `E[eps | x_t]` for an i.i.d. Gaussian-mixture pixel prior.
#[derive(Debug, Clone)]
pub struct AnalyticGmDenoiser {
    prior: GaussianMixture,
    schedule: NoiseSchedule,
}

impl AnalyticGmDenoiser {
    pub fn new(prior: GaussianMixture, schedule: NoiseSchedule) -> Self {
        AnalyticGmDenoiser { prior, schedule }
    }

    pub fn prior(&self) -> &GaussianMixture {
        &self.prior
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn predict_value(&self, x: f64, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(param_err!("noise is undefined at t = 0"));
        }
        let a = self.schedule.alpha_bar(t)?;
        let x0 = self.prior.posterior_mean(x, a);
        Ok((x - a.sqrt() * x0) / (1.0 - a).sqrt())
    }
}

impl Denoiser for AnalyticGmDenoiser {
    fn predict(&self, x_t: &ImagePatch, t: usize) -> Result<ImagePatch> {
        if t == 0 {
            return Err(param_err!("noise is undefined at t = 0"));
        }
        let a = self.schedule.alpha_bar(t)?;
        let (sa, s) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(x_t.map(|x| {
            let x = x as f64;
            ((x - sa * self.prior.posterior_mean(x, a)) / s) as f32
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

impl LossKind {
    /// Mean loss of `pred - target` and, when `grad` is given, the matching
    /// derivative scaled by `scale`.
    pub(crate) fn eval(&self, pred: &Array2<f64>, target: &Array2<f64>, scale: f64) -> (f64, Array2<f64>) {
        let n = pred.len() as f64;
        let diff = pred - target;
        match self {
            LossKind::L1 => {
                let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
                let g = diff.mapv(|d| scale * d.signum() * (d != 0.0) as i32 as f64 / n);
                (loss, g)
            }
            LossKind::L2 => {
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
                let g = diff.mapv(|d| scale * 2.0 * d / n);
                (loss, g)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserArch {
    pub channels: usize,
    pub width1: usize,
    pub width2: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch {
            channels: 1,
            width1: 64,
            width2: 64,
            time_embed_dim: TIME_EMBED_DIM,
        }
    }
}

/// Per-pixel epsilon network: `3 x 3` window layer plus a projected
/// sinusoidal step embedding, a second SiLU layer, and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    pub trunk: PixelTrunk,
    pub time: Dense,
    pub out: Dense,
    /// Schedule the network was trained against.
    pub schedule: ScheduleSpec,
}

impl Parameterized for TinyDenoiser {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.slices();
        v.extend(self.time.slices());
        v.extend(self.out.slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.slices_mut();
        v.extend(self.time.slices_mut());
        v.extend(self.out.slices_mut());
        v
    }
}

impl TinyDenoiser {
    pub fn new(arch: DenoiserArch, schedule: ScheduleSpec, rng: &mut SeededRng) -> Self {
        let trunk = PixelTrunk::init(arch.channels, arch.width1, arch.width2, rng);
        let time = Dense::init(arch.time_embed_dim, arch.width1, 1.0, rng);
        let out = Dense::init(arch.width2, arch.channels, 1.0, rng);
        TinyDenoiser {
            trunk,
            time,
            out,
            schedule,
        }
    }

    pub fn arch(&self) -> DenoiserArch {
        let (width1, width2) = self.trunk.widths();
        DenoiserArch {
            channels: self.trunk.channels(),
            width1,
            width2,
            time_embed_dim: self.time.inputs(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        TinyDenoiser {
            trunk: self.trunk.zeros_like(),
            time: Dense::zeros(self.time.inputs(), self.time.outputs()),
            out: Dense::zeros(self.out.inputs(), self.out.outputs()),
            schedule: self.schedule,
        }
    }

    fn check_input(&self, x: &ImagePatch) -> Result<()> {
        if x.channels() != self.trunk.channels() {
            return Err(Error::Contract(format!(
                "denoiser expects {} channels, got {}",
                self.trunk.channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    fn time_bias(&self, t: usize) -> (Array2<f64>, Array1<f64>) {
        let emb = time_embedding(t, self.time.inputs()).insert_axis(ndarray::Axis(0));
        let bias = self.time.forward(&emb).row(0).to_owned();
        (emb, bias)
    }

    /// Raw output as a `pixels x channels` matrix.
    fn forward_matrix(&self, x_t: &ImagePatch, t: usize) -> Array2<f64> {
        let (_, bias) = self.time_bias(t);
        let cache = self.trunk.forward(windows(x_t), Some(&bias));
        self.out.forward(&cache.act2)
    }

    /// Loss against the true noise; accumulates `scale * dL/dtheta` into
    /// `grad` when given.
    pub fn loss(
        &self,
        x_t: &ImagePatch,
        t: usize,
        eps: &ImagePatch,
        kind: LossKind,
        grad: Option<(&mut TinyDenoiser, f64)>,
    ) -> Result<f64> {
        self.check_input(x_t)?;
        let (emb, bias) = self.time_bias(t);
        let cache = self.trunk.forward(windows(x_t), Some(&bias));
        let pred = self.out.forward(&cache.act2);
        let target = channel_major_to_matrix(eps);
        let scale = grad.as_ref().map_or(1.0, |g| g.1);
        let (loss, d_pred) = kind.eval(&pred, &target, scale);
        if let Some((g, _)) = grad {
            let d_act2 = self.out.backward(&cache.act2, &d_pred, &mut g.out);
            let d_bias = self.trunk.backward(&cache, d_act2, &mut g.trunk);
            g.time.accumulate(&emb, &d_bias.insert_axis(ndarray::Axis(0)));
        }
        Ok(loss)
    }
}

pub(crate) fn channel_major_to_matrix(img: &ImagePatch) -> Array2<f64> {
    let p = img.height() * img.width();
    let c = img.channels();
    let d = img.data();
    Array2::from_shape_fn((p, c), |(i, k)| d[k * p + i] as f64)
}

fn matrix_to_image(m: &Array2<f64>, like: &ImagePatch) -> ImagePatch {
    let p = like.height() * like.width();
    let data: Vec<f64> = (0..like.len()).map(|j| m[[j % p, j / p]]).collect();
    ImagePatch::from_f64(like.shape(), &data)
}

impl Denoiser for TinyDenoiser {
    fn predict(&self, x_t: &ImagePatch, t: usize) -> Result<ImagePatch> {
        self.check_input(x_t)?;
        let out = self.forward_matrix(x_t, t);
        Ok(matrix_to_image(&out, x_t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            epochs: 30,
            lr: 2e-3,
            batch_size: 4,
            loss: LossKind::L1,
            optimizer: OptimizerKind::default(),
            lr_schedule: LrSchedule::default(),
        }
    }
}

/// Loss history of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    /// `steps_seen[t]` counts the training draws at step `t`.
    pub steps_seen: Vec<u64>,
}

impl TrainReport {
    pub(crate) fn new(max_step: usize) -> Self {
        TrainReport {
            epoch_losses: Vec::new(),
            final_loss: f64::NAN,
            steps_seen: vec![0; max_step + 1],
        }
    }
}

/// Trains on noise-prediction with steps drawn from `1..=t_prime` only.
///
/// Each epoch visits the corpus in a fresh random order; every visit draws
/// `t`, draws `eps`, forms `x_t` and accumulates the loss gradient. Parameters
/// are updated every `batch_size` visits.
pub fn train_denoiser(
    model: &mut TinyDenoiser,
    corpus: &[ImagePatch],
    schedule: &NoiseSchedule,
    t_prime: usize,
    cfg: &DenoiserTrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(param_err!("training corpus is empty"));
    }
    if t_prime == 0 || t_prime > schedule.steps() {
        return Err(param_err!("max training step {t_prime} outside 1..={}", schedule.steps()));
    }
    if cfg.batch_size == 0 {
        return Err(param_err!("batch size must be positive"));
    }
    let mut report = TrainReport::new(t_prime);
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
                let t = rng.range_inclusive(1, t_prime);
                report.steps_seen[t] += 1;
                let (x_t, eps) = crate::diffusion::q_sample(&corpus[idx], t, schedule, rng)?;
                let loss = model.loss(&x_t, t, &eps, cfg.loss, Some((&mut grad, scale)))?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "denoiser loss became {loss} at epoch {epoch}, batch {i}, t = {t}"
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

/// Continues training on a (typically small, high-quality) corpus with the
/// same contract as [`train_denoiser`].
pub fn finetune_denoiser(
    model: &mut TinyDenoiser,
    corpus: &[ImagePatch],
    schedule: &NoiseSchedule,
    t_prime: usize,
    cfg: &DenoiserTrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    train_denoiser(model, corpus, schedule, t_prime, cfg, rng)
}

pub(crate) fn permutation(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
    v
}
