//! Restoration samplers.
//!
//! [`rscd_restore`] runs the calibrated reverse chain: calibrate, take `d`
//! reverse steps, recalibrate, and repeat until fewer than `d` steps remain,
//! which are then finished without further calibration. An NFE budget (and,
//! by default, clamping each recalibration to the previous remaining count)
//! guarantees termination for any calibrator.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::calibrator::{round_and_clamp, StepCalibrator};
use crate::denoiser::Denoiser;
use crate::diffusion::{q_sample, reverse_chain, NfeCounter, ReverseStepConfig};
use crate::error::{param_err, Result};
use crate::image::{reflect_index, ImagePatch, SeededRng};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_INTERVAL: usize = 10;
pub const DEFAULT_MAX_STEPS: usize = 200;
pub const DEFAULT_NFE_BUDGET: u64 = 400;
pub const DEFAULT_CCDF_STEPS: usize = 20;
pub const DEFAULT_MEDIAN_KERNEL: usize = 5;
/// Fixed-step ablation presets.
pub const FIXED_PRESETS: [usize; 2] = [10, 50];
/// Recalibration interval ablation presets.
pub const INTERVAL_PRESETS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestoreConfig {
    /// Recalibration interval `d`.
    pub interval: usize,
    /// Upper bound `T'` on any calibration.
    pub max_steps: usize,
    pub nfe_budget: u64,
    pub noise_at_final_step: bool,
    /// Never let a recalibration exceed the previous remaining count.
    pub clamp_recalibration: bool,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        RestoreConfig {
            interval: DEFAULT_INTERVAL,
            max_steps: DEFAULT_MAX_STEPS,
            nfe_budget: DEFAULT_NFE_BUDGET,
            noise_at_final_step: true,
            clamp_recalibration: true,
        }
    }
}

impl RestoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(param_err!("recalibration interval must be at least 1"));
        }
        if self.nfe_budget < self.max_steps as u64 {
            return Err(param_err!(
                "NFE budget {} is below the step bound {}",
                self.nfe_budget,
                self.max_steps
            ));
        }
        Ok(())
    }

    fn step_config(&self) -> ReverseStepConfig {
        ReverseStepConfig {
            noise_at_final_step: self.noise_at_final_step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEvent {
    /// Steps the sampler will run from here (after rounding and clamping).
    pub remaining: usize,
    /// Unrounded calibrator output.
    pub raw: f64,
    /// NFE consumed when the calibration was made.
    pub at_nfe: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationTrace {
    pub method: String,
    pub events: Vec<CalibrationEvent>,
    pub nfe: u64,
    pub budget_hit: bool,
    pub wall_time: Duration,
}

impl RestorationTrace {
    fn new(method: &str) -> Self {
        RestorationTrace {
            method: method.to_string(),
            events: Vec::new(),
            nfe: 0,
            budget_hit: false,
            wall_time: Duration::ZERO,
        }
    }

    pub fn remaining_sequence(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.remaining).collect()
    }
}

fn calibrate(
    x: &ImagePatch,
    calibrator: &dyn StepCalibrator,
    bound: usize,
    at_nfe: u64,
) -> Result<CalibrationEvent> {
    x.ensure_finite()?;
    let raw = calibrator.raw_predict(x)?;
    Ok(CalibrationEvent {
        remaining: round_and_clamp(raw, bound),
        raw,
        at_nfe,
    })
}

fn step_bound(calibrator: &dyn StepCalibrator, schedule: &NoiseSchedule, cfg: &RestoreConfig) -> usize {
    calibrator.max_step().min(cfg.max_steps).min(schedule.steps())
}

/// Calibrated restoration with dynamic recalibration every `cfg.interval`
/// steps.
pub fn rscd_restore(
    x: &ImagePatch,
    calibrator: &dyn StepCalibrator,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &RestoreConfig,
    rng: &mut SeededRng,
) -> Result<(ImagePatch, RestorationTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut trace = RestorationTrace::new("rscd");
    let mut nfe = NfeCounter::new();
    let bound = step_bound(calibrator, schedule, cfg);
    let d = cfg.interval;
    let step_cfg = cfg.step_config();

    let first = calibrate(x, calibrator, bound, 0)?;
    let mut t = first.remaining;
    trace.events.push(first);
    let mut cur = x.clone();
    while t > 0 {
        let chunk = t.min(d);
        if nfe.get() + chunk as u64 > cfg.nfe_budget {
            trace.budget_hit = true;
            break;
        }
        cur = reverse_chain(&cur, t, t - chunk, denoiser, schedule, step_cfg, rng, &mut nfe)?;
        if t < d {
            break;
        }
        let remaining = t - d;
        if cfg.clamp_recalibration && remaining == 0 {
            break;
        }
        let mut ev = calibrate(&cur, calibrator, bound, nfe.get())?;
        if cfg.clamp_recalibration {
            ev.remaining = ev.remaining.min(remaining);
        }
        t = ev.remaining;
        trace.events.push(ev);
    }
    trace.nfe = nfe.get();
    trace.wall_time = start.elapsed();
    Ok((cur, trace))
}

/// Single calibration followed by that many reverse steps.
pub fn no_recal_restore(
    x: &ImagePatch,
    calibrator: &dyn StepCalibrator,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &RestoreConfig,
    rng: &mut SeededRng,
) -> Result<(ImagePatch, RestorationTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut trace = RestorationTrace::new("no_recal");
    let mut nfe = NfeCounter::new();
    let ev = calibrate(x, calibrator, step_bound(calibrator, schedule, cfg), 0)?;
    let t = ev.remaining;
    trace.events.push(ev);
    let out = if t as u64 > cfg.nfe_budget {
        trace.budget_hit = true;
        x.clone()
    } else {
        reverse_chain(x, t, 0, denoiser, schedule, cfg.step_config(), rng, &mut nfe)?
    };
    trace.nfe = nfe.get();
    trace.wall_time = start.elapsed();
    Ok((out, trace))
}

/// Exactly `n_steps` reverse steps starting from step `n_steps`.
pub fn fixed_step_restore(
    x: &ImagePatch,
    n_steps: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &RestoreConfig,
    rng: &mut SeededRng,
) -> Result<(ImagePatch, RestorationTrace)> {
    if n_steps == 0 || n_steps > schedule.steps() {
        return Err(param_err!("fixed step count {n_steps} outside 1..={}", schedule.steps()));
    }
    x.ensure_finite()?;
    let start = Instant::now();
    let mut trace = RestorationTrace::new(&format!("fixed{n_steps}"));
    trace.events.push(CalibrationEvent {
        remaining: n_steps,
        raw: n_steps as f64,
        at_nfe: 0,
    });
    let mut nfe = NfeCounter::new();
    let out = reverse_chain(x, n_steps, 0, denoiser, schedule, cfg.step_config(), rng, &mut nfe)?;
    trace.nfe = nfe.get();
    trace.wall_time = start.elapsed();
    Ok((out, trace))
}

/// Adds `n_add` steps of forward noise, then reverses `n_add` steps.
pub fn ccdf_restore(
    x: &ImagePatch,
    n_add: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &RestoreConfig,
    rng: &mut SeededRng,
) -> Result<(ImagePatch, RestorationTrace)> {
    if n_add == 0 || n_add > schedule.steps() {
        return Err(param_err!("CCDF step count {n_add} outside 1..={}", schedule.steps()));
    }
    x.ensure_finite()?;
    let start = Instant::now();
    let mut trace = RestorationTrace::new(&format!("ccdf{n_add}"));
    trace.events.push(CalibrationEvent {
        remaining: n_add,
        raw: n_add as f64,
        at_nfe: 0,
    });
    let (noisy, _) = q_sample(x, n_add, schedule, rng)?;
    let mut nfe = NfeCounter::new();
    let out = reverse_chain(&noisy, n_add, 0, denoiser, schedule, cfg.step_config(), rng, &mut nfe)?;
    trace.nfe = nfe.get();
    trace.wall_time = start.elapsed();
    Ok((out, trace))
}

/// Per-channel `k x k` median with mirror padding.
pub fn median_blur(x: &ImagePatch, k: usize) -> Result<ImagePatch> {
    if k % 2 == 0 {
        return Err(param_err!("median kernel must be odd, got {k}"));
    }
    let r = (k / 2) as isize;
    let (h, w) = (x.height(), x.width());
    let mut buf = Vec::with_capacity(k * k);
    Ok(ImagePatch::from_fn(x.shape(), |c, y, xx| {
        buf.clear();
        for dy in -r..=r {
            let yy = reflect_index(y as isize + dy, h);
            for dx in -r..=r {
                buf.push(x.get(c, yy, reflect_index(xx as isize + dx, w)));
            }
        }
        let mid = buf.len() / 2;
        *buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
    }))
}

/// A median-blur "trace": no denoiser calls, no calibration.
pub fn median_restore(x: &ImagePatch, k: usize) -> Result<(ImagePatch, RestorationTrace)> {
    let start = Instant::now();
    let out = median_blur(x, k)?;
    let mut trace = RestorationTrace::new(&format!("median{k}"));
    trace.events.push(CalibrationEvent {
        remaining: 0,
        raw: 0.0,
        at_nfe: 0,
    });
    trace.wall_time = start.elapsed();
    Ok((out, trace))
}
