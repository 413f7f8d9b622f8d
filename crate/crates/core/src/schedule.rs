//! Diffusion noise schedules.
//!
//! A schedule holds `beta_t`, `alpha_t = 1 - beta_t` for `t in 1..=T` and the
//! cumulative products `alpha_bar_t` for `t in 0..=T`, with `alpha_bar_0 = 1`
//! so that step 0 is the clean image. Schedules serialize as
//! `(kind, steps, params)` only; the tables are rebuilt on load.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

pub const BETA_MIN_CLIP: f64 = 1e-8;
pub const BETA_MAX_CLIP: f64 = 0.999;

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_LINEAR_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_LINEAR_BETA_MAX: f64 = 0.02;
pub const DEFAULT_TOTAL_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine { s: f64 },
    Linear { beta_min: f64, beta_max: f64 },
}

impl ScheduleKind {
    pub fn cosine() -> Self {
        ScheduleKind::Cosine { s: DEFAULT_COSINE_OFFSET }
    }

    pub fn linear() -> Self {
        ScheduleKind::Linear {
            beta_min: DEFAULT_LINEAR_BETA_MIN,
            beta_max: DEFAULT_LINEAR_BETA_MAX,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Cosine { .. } => "cosine",
            ScheduleKind::Linear { .. } => "linear",
        }
    }
}

/// Serialized form of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::cosine(),
            steps: DEFAULT_TOTAL_STEPS,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = crate::Error;
    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        spec.build()
    }
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> Self {
        s.spec()
    }
}

fn cosine_f(t: f64, total: f64, s: f64) -> f64 {
    let angle = (t / total + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
    angle.cos().powi(2)
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(param_err!("schedule needs at least one step"));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Cosine { s } => {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(param_err!("cosine offset s must be positive, got {s}"));
                }
                let total = steps as f64;
                let f0 = cosine_f(0.0, total, s);
                let mut prev = 1.0;
                (1..=steps)
                    .map(|t| {
                        let bar = cosine_f(t as f64, total, s) / f0;
                        let b = (1.0 - bar / prev).clamp(BETA_MIN_CLIP, BETA_MAX_CLIP);
                        prev = bar;
                        b
                    })
                    .collect()
            }
            ScheduleKind::Linear { beta_min, beta_max } => {
                if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
                    return Err(param_err!(
                        "linear schedule needs 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}"
                    ));
                }
                if steps == 1 {
                    vec![beta_min]
                } else {
                    let span = beta_max - beta_min;
                    (0..steps)
                        .map(|i| beta_min + span * i as f64 / (steps - 1) as f64)
                        .collect()
                }
            }
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let last = *alpha_bar.last().unwrap();
            alpha_bar.push(last * a);
        }
        let sigma = alpha_bar.iter().map(|ab| (1.0 - ab).max(0.0).sqrt()).collect();
        Ok(NoiseSchedule {
            kind,
            steps,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::cosine(), steps)
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::linear(), steps)
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.kind,
            steps: self.steps,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Total number of steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            Err(param_err!("step {t} outside {lo}..={}", self.steps))
        } else {
            Ok(())
        }
    }

    /// `beta_t` for `t in 1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.beta[t - 1])
    }

    /// `alpha_t` for `t in 1..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.alpha[t - 1])
    }

    /// `alpha_bar_t` for `t in 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(self.alpha_bar[t])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// `alpha_bar_0..=alpha_bar_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Cumulative noise level `sqrt(1 - alpha_bar_t)`.
    pub fn cumulative_noise(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(self.sigma[t])
    }

    /// Step whose cumulative noise is closest to `sigma_hat`; ties go to the
    /// smaller step and values beyond `sigma(T)` clamp to `T`.
    pub fn nearest_step(&self, sigma_hat: f64) -> usize {
        if !(sigma_hat > 0.0) {
            return 0;
        }
        // first index with sigma >= sigma_hat
        let hi = self.sigma.partition_point(|&s| s < sigma_hat);
        if hi > self.steps {
            return self.steps;
        }
        if hi == 0 {
            return 0;
        }
        let lo = hi - 1;
        if sigma_hat - self.sigma[lo] <= self.sigma[hi] - sigma_hat {
            lo
        } else {
            hi
        }
    }
}
