//! Experiment orchestration: method roster, ordering benchmark, predicted
//! step histogram, toy downstream classification and z-stack depth curves.
//!
//! Everything is a pure function of the configuration, the model set and the
//! seeds. Images are processed in parallel, each with its own random stream
//! (`SeededRng::new(seed, image_index)`), and results are gathered in image
//! order, so output files are byte-identical across runs and thread counts.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrator::{NeuralStepCalibrator, NonparametricCalibrator, StepCalibrator, DEFAULT_PATCH};
use crate::denoiser::{Denoiser, TinyDenoiser};
use crate::error::{param_err, Error, Result};
use crate::image::{ImagePatch, SeededRng, Shape, Volume};
use crate::metrics::{mmd_rbf, psnr, ssim, MetricReport, MMD_MIN_SET};
use crate::restore::{
    ccdf_restore, fixed_step_restore, median_restore, no_recal_restore, rscd_restore, RestorationTrace, RestoreConfig,
    DEFAULT_CCDF_STEPS, DEFAULT_MEDIAN_KERNEL,
};
use crate::schedule::NoiseSchedule;
use crate::synth::{csv_err, degrade_corpus, gen_two_class_corpus, gen_zstack, DegradeSpec, DepthProfile, TRange};
use crate::image::MaskKind;

/// Every method a report can name. The last five need pretrained or
/// adversarial networks and are reported as "not implemented".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Rscd,
    RscdD5,
    RscdD20,
    NoRecal,
    Fixed10,
    Fixed50,
    Ccdf20,
    Median5,
    RscdNonparam,
    RscdLinear,
    RscdUnaug,
    Cyclegan,
    Dip,
    SyntheticNoiseUnet,
    ConditionalDiffusion,
    Rrd,
}

impl MethodId {
    pub const ALL: [MethodId; 16] = [
        MethodId::Rscd,
        MethodId::RscdD5,
        MethodId::RscdD20,
        MethodId::NoRecal,
        MethodId::Fixed10,
        MethodId::Fixed50,
        MethodId::Ccdf20,
        MethodId::Median5,
        MethodId::RscdNonparam,
        MethodId::RscdLinear,
        MethodId::RscdUnaug,
        MethodId::Cyclegan,
        MethodId::Dip,
        MethodId::SyntheticNoiseUnet,
        MethodId::ConditionalDiffusion,
        MethodId::Rrd,
    ];

    /// The default benchmark roster (table-1 style rows).
    pub const DEFAULT_ROSTER: [MethodId; 14] = [
        MethodId::Rscd,
        MethodId::NoRecal,
        MethodId::Fixed10,
        MethodId::Fixed50,
        MethodId::Ccdf20,
        MethodId::Median5,
        MethodId::RscdNonparam,
        MethodId::RscdLinear,
        MethodId::RscdUnaug,
        MethodId::Cyclegan,
        MethodId::Dip,
        MethodId::SyntheticNoiseUnet,
        MethodId::ConditionalDiffusion,
        MethodId::Rrd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Rscd => "rscd",
            MethodId::RscdD5 => "rscd_d5",
            MethodId::RscdD20 => "rscd_d20",
            MethodId::NoRecal => "no_recal",
            MethodId::Fixed10 => "fixed10",
            MethodId::Fixed50 => "fixed50",
            MethodId::Ccdf20 => "ccdf20",
            MethodId::Median5 => "median5",
            MethodId::RscdNonparam => "rscd_nonparam",
            MethodId::RscdLinear => "rscd_linear",
            MethodId::RscdUnaug => "rscd_unaug",
            MethodId::Cyclegan => "cyclegan",
            MethodId::Dip => "dip",
            MethodId::SyntheticNoiseUnet => "synthetic_noise_unet",
            MethodId::ConditionalDiffusion => "conditional_diffusion",
            MethodId::Rrd => "rrd",
        }
    }

    pub fn implemented(self) -> bool {
        self.restorer().is_some()
    }

    pub fn restorer(self) -> Option<Restorer> {
        use CalibratorChoice::*;
        let rscd = |interval, calibrator| Restorer::Rscd { interval, calibrator };
        Some(match self {
            MethodId::Rscd => rscd(None, Augmented),
            MethodId::RscdD5 => rscd(Some(5), Augmented),
            MethodId::RscdD20 => rscd(Some(20), Augmented),
            MethodId::NoRecal => Restorer::NoRecal { calibrator: Augmented },
            MethodId::Fixed10 => Restorer::Fixed(10),
            MethodId::Fixed50 => Restorer::Fixed(50),
            MethodId::Ccdf20 => Restorer::Ccdf(DEFAULT_CCDF_STEPS),
            MethodId::Median5 => Restorer::Median(DEFAULT_MEDIAN_KERNEL),
            MethodId::RscdNonparam => rscd(None, Nonparametric),
            MethodId::RscdLinear => rscd(None, LinearSchedule),
            MethodId::RscdUnaug => rscd(None, Unaugmented),
            _ => return None,
        })
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| param_err!("unknown method `{s}`"))
    }
}

/// Which calibrator (and, for the linear variant, which model pair) drives
/// a calibrated restorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibratorChoice {
    Augmented,
    Unaugmented,
    Nonparametric,
    /// Denoiser and augmented calibrator trained under the linear schedule.
    LinearSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restorer {
    /// `interval = None` uses the configured `d`.
    Rscd {
        interval: Option<usize>,
        calibrator: CalibratorChoice,
    },
    NoRecal {
        calibrator: CalibratorChoice,
    },
    Fixed(usize),
    Ccdf(usize),
    Median(usize),
}

/// Trained models available to a run. The nonparametric calibrator needs no
/// training and is built on demand.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub schedule: NoiseSchedule,
    pub denoiser: Option<TinyDenoiser>,
    pub calibrator: Option<NeuralStepCalibrator>,
    pub unaug_calibrator: Option<NeuralStepCalibrator>,
    pub linear: Option<LinearModels>,
    pub nonparametric_patch: usize,
}

#[derive(Debug, Clone)]
pub struct LinearModels {
    pub schedule: NoiseSchedule,
    pub denoiser: TinyDenoiser,
    pub calibrator: NeuralStepCalibrator,
}

impl ModelSet {
    pub fn new(schedule: NoiseSchedule) -> Self {
        ModelSet {
            schedule,
            denoiser: None,
            calibrator: None,
            unaug_calibrator: None,
            linear: None,
            nonparametric_patch: DEFAULT_PATCH,
        }
    }

    fn missing(what: &str, method: &str) -> Error {
        Error::Config(format!("method `{method}` needs a {what}, but none was provided"))
    }

    /// Config error if `restorer` lacks a model it needs.
    pub fn check(&self, restorer: Restorer, method: &str) -> Result<()> {
        let needs_denoiser = !matches!(restorer, Restorer::Median(_));
        let choice = match restorer {
            Restorer::Rscd { calibrator, .. } | Restorer::NoRecal { calibrator } => Some(calibrator),
            _ => None,
        };
        if choice == Some(CalibratorChoice::LinearSchedule) {
            return match self.linear {
                Some(_) => Ok(()),
                None => Err(Self::missing("linear-schedule denoiser and calibrator", method)),
            };
        }
        if needs_denoiser && self.denoiser.is_none() {
            return Err(Self::missing("denoiser checkpoint", method));
        }
        match choice {
            Some(CalibratorChoice::Augmented) if self.calibrator.is_none() => {
                Err(Self::missing("calibrator checkpoint", method))
            }
            Some(CalibratorChoice::Unaugmented) if self.unaug_calibrator.is_none() => {
                Err(Self::missing("unaugmented calibrator checkpoint", method))
            }
            _ => Ok(()),
        }
    }

    fn nonparametric(&self, cfg: &RestoreConfig) -> Result<NonparametricCalibrator> {
        NonparametricCalibrator::new(self.schedule.clone(), self.nonparametric_patch, cfg.max_steps)
    }

    fn calibrated(
        &self,
        choice: CalibratorChoice,
        cfg: &RestoreConfig,
    ) -> Result<(CalibratorRef<'_>, &dyn Denoiser, &NoiseSchedule)> {
        let missing = || Error::Config("calibrated restoration needs trained models".into());
        let den = self.denoiser.as_ref().map(|d| d as &dyn Denoiser);
        Ok(match choice {
            CalibratorChoice::Augmented => (
                CalibratorRef::Borrowed(self.calibrator.as_ref().ok_or_else(missing)?),
                den.ok_or_else(missing)?,
                &self.schedule,
            ),
            CalibratorChoice::Unaugmented => (
                CalibratorRef::Borrowed(self.unaug_calibrator.as_ref().ok_or_else(missing)?),
                den.ok_or_else(missing)?,
                &self.schedule,
            ),
            CalibratorChoice::Nonparametric => (
                CalibratorRef::Owned(self.nonparametric(cfg)?),
                den.ok_or_else(missing)?,
                &self.schedule,
            ),
            CalibratorChoice::LinearSchedule => {
                let l = self.linear.as_ref().ok_or_else(missing)?;
                (CalibratorRef::Borrowed(&l.calibrator), &l.denoiser, &l.schedule)
            }
        })
    }

    /// Runs one restoration. Call [`ModelSet::check`] first; missing models
    /// here are reported as config errors as well.
    pub fn restore(
        &self,
        restorer: Restorer,
        x: &ImagePatch,
        cfg: &RestoreConfig,
        rng: &mut SeededRng,
    ) -> Result<(ImagePatch, RestorationTrace)> {
        self.check(restorer, "restore")?;
        let den = || self.denoiser.as_ref().expect("checked") as &dyn Denoiser;
        match restorer {
            Restorer::Rscd { interval, calibrator } => {
                let cfg = RestoreConfig {
                    interval: interval.unwrap_or(cfg.interval),
                    ..*cfg
                };
                let (c, d, s) = self.calibrated(calibrator, &cfg)?;
                rscd_restore(x, c.get(), d, s, &cfg, rng)
            }
            Restorer::NoRecal { calibrator } => {
                let (c, d, s) = self.calibrated(calibrator, cfg)?;
                no_recal_restore(x, c.get(), d, s, cfg, rng)
            }
            Restorer::Fixed(n) => fixed_step_restore(x, n, den(), &self.schedule, cfg, rng),
            Restorer::Ccdf(n) => ccdf_restore(x, n, den(), &self.schedule, cfg, rng),
            Restorer::Median(k) => median_restore(x, k),
        }
    }
}

enum CalibratorRef<'a> {
    Borrowed(&'a dyn StepCalibrator),
    Owned(NonparametricCalibrator),
}

impl CalibratorRef<'_> {
    fn get(&self) -> &dyn StepCalibrator {
        match self {
            CalibratorRef::Borrowed(c) => *c,
            CalibratorRef::Owned(c) => c,
        }
    }
}

/// One CSV row per restoration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub image_id: usize,
    pub method: String,
    pub nfe: u64,
    /// `remaining@nfe` pairs joined by `;`.
    pub events: String,
    pub budget_hit: bool,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

impl TraceRow {
    pub fn new(image_id: usize, method: &str, trace: &RestorationTrace, scores: Option<(f64, f64)>) -> Self {
        let events = trace
            .events
            .iter()
            .map(|e| format!("{}@{}", e.remaining, e.at_nfe))
            .collect::<Vec<_>>()
            .join(";");
        TraceRow {
            image_id,
            method: method.to_string(),
            nfe: trace.nfe,
            events,
            budget_hit: trace.budget_hit,
            psnr: scores.map(|s| s.0),
            ssim: scores.map(|s| s.1),
        }
    }
}

pub fn write_trace_csv<W: Write>(w: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub shape: Shape,
    /// Evaluation images per class (blobs and texture).
    pub eval_per_class: usize,
    /// Independent clean images per class forming the MMD reference set.
    pub reference_per_class: usize,
    pub degrade: DegradeSpec,
    pub roster: Vec<MethodId>,
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            shape: Shape::default(),
            eval_per_class: 20,
            reference_per_class: 20,
            degrade: DegradeSpec::TwoRegion {
                t: TRange::Uniform { lo: 1, hi: 200 },
                mask: MaskKind::HalfPlane,
            },
            roster: MethodId::DEFAULT_ROSTER.to_vec(),
            seeds: vec![1, 2, 3],
        }
    }
}

impl BenchConfig {
    pub fn validate(&self, t_prime: usize) -> Result<()> {
        if self.roster.is_empty() {
            return Err(Error::Config("benchmark roster is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("benchmark needs at least one seed".into()));
        }
        if self.eval_per_class == 0 {
            return Err(Error::Config("eval_per_class must be positive".into()));
        }
        self.degrade.validate(t_prime)
    }
}

const REFERENCE_TAG: u64 = 0x5ef;
const DEGRADE_TAG: u64 = 0xde6;

/// Clean evaluation set, degraded copies with their true steps, and an
/// independent clean reference population for one seed.
pub struct EvalSet {
    pub clean: Vec<ImagePatch>,
    pub labels: Vec<u8>,
    pub degraded: Vec<ImagePatch>,
    pub true_t: Vec<usize>,
    pub reference: Vec<ImagePatch>,
}

pub fn eval_set(cfg: &BenchConfig, schedule: &NoiseSchedule, seed: u64) -> Result<EvalSet> {
    let clean = gen_two_class_corpus(cfg.shape, cfg.eval_per_class, seed)?;
    let reference = if cfg.reference_per_class > 0 {
        gen_two_class_corpus(cfg.shape, cfg.reference_per_class, SeededRng::new(seed, REFERENCE_TAG).derive(0).seed())?.images
    } else {
        Vec::new()
    };
    let lq = degrade_corpus(&clean.images, &cfg.degrade, schedule, &SeededRng::new(seed, DEGRADE_TAG))?;
    let (degraded, true_t) = lq.into_iter().unzip();
    Ok(EvalSet {
        clean: clean.images,
        labels: clean.labels,
        degraded,
        true_t,
        reference,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub method: String,
    pub status: String,
    pub images: usize,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    /// Unbiased RBF MMD against the clean reference population (not FID).
    pub mmd: Option<f64>,
    pub mean_nfe: Option<f64>,
    pub max_nfe: Option<u64>,
    pub budget_hits: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub seed: u64,
    pub method: MethodId,
    pub report: MetricReport,
    pub traces: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub summary: Vec<SummaryRow>,
    pub results: Vec<MethodResult>,
}

impl BenchReport {
    pub fn row(&self, seed: u64, method: MethodId) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.seed == seed && r.method == method.name())
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.summary {
            w.serialize(SummaryCsvRow::from(r)).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("CSV is UTF-8"))
    }

    /// Human-readable aligned table.
    pub fn summary_table(&self) -> String {
        let header = ["seed", "method", "status", "images", "PSNR", "SSIM", "MMD (not FID)", "mean NFE", "budget hits"];
        let cells: Vec<[String; 9]> = self
            .summary
            .iter()
            .map(|r| {
                let SummaryCsvRow {
                    mean_psnr,
                    mean_ssim,
                    mmd,
                    mean_nfe,
                    budget_hits,
                    ..
                } = SummaryCsvRow::from(r);
                [
                    r.seed.to_string(),
                    r.method.clone(),
                    r.status.clone(),
                    r.images.to_string(),
                    mean_psnr,
                    mean_ssim,
                    mmd,
                    mean_nfe,
                    budget_hits,
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

/// Fixed-precision rendering so summaries are byte-stable.
#[derive(Serialize)]
struct SummaryCsvRow {
    seed: u64,
    method: String,
    status: String,
    images: usize,
    mean_psnr: String,
    mean_ssim: String,
    mmd: String,
    mean_nfe: String,
    max_nfe: String,
    budget_hits: String,
}

impl From<&SummaryRow> for SummaryCsvRow {
    fn from(r: &SummaryRow) -> Self {
        let f = |v: Option<f64>, p: usize| v.map_or(String::new(), |v| format!("{v:.p$}"));
        SummaryCsvRow {
            seed: r.seed,
            method: r.method.clone(),
            status: r.status.clone(),
            images: r.images,
            mean_psnr: f(r.mean_psnr, 4),
            mean_ssim: f(r.mean_ssim, 4),
            mmd: f(r.mmd, 6),
            mean_nfe: f(r.mean_nfe, 2),
            max_nfe: r.max_nfe.map_or(String::new(), |v| v.to_string()),
            budget_hits: r.budget_hits.map_or(String::new(), |v| v.to_string()),
        }
    }
}

/// Restores every evaluation image with every roster method, for every seed.
///
/// All roster methods are checked against `models` before any work starts.
/// With `out_dir`, writes `seed<S>/metrics_<method>.csv`,
/// `seed<S>/trace_<method>.csv`, `summary.csv` and `summary.txt`.
pub fn run_benchmark(cfg: &BenchConfig, models: &ModelSet, restore: &RestoreConfig, out_dir: Option<&Path>) -> Result<BenchReport> {
    cfg.validate(restore.max_steps)?;
    restore.validate()?;
    for m in &cfg.roster {
        if let Some(r) = m.restorer() {
            models.check(r, m.name())?;
        }
    }
    let mut summary = Vec::new();
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let set = eval_set(cfg, &models.schedule, seed)?;
        for &method in &cfg.roster {
            let Some(restorer) = method.restorer() else {
                summary.push(SummaryRow {
                    seed,
                    method: method.name().into(),
                    status: "not implemented".into(),
                    images: 0,
                    mean_psnr: None,
                    mean_ssim: None,
                    mmd: None,
                    mean_nfe: None,
                    max_nfe: None,
                    budget_hits: None,
                });
                continue;
            };
            let outs = set
                .degraded
                .par_iter()
                .enumerate()
                .map(|(i, x)| models.restore(restorer, x, restore, &mut SeededRng::new(seed, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let (images, traces): (Vec<ImagePatch>, Vec<RestorationTrace>) = outs.into_iter().unzip();
            let mut report = MetricReport::evaluate(method.name(), &images, &set.clean)?;
            report.mmd = if set.reference.len() >= MMD_MIN_SET && images.len() >= MMD_MIN_SET {
                Some(mmd_rbf(&images, &set.reference)?)
            } else {
                None
            };
            let trace_rows: Vec<TraceRow> = traces
                .iter()
                .zip(&report.scores)
                .enumerate()
                .map(|(i, (t, s))| TraceRow::new(i, method.name(), t, Some((s.psnr, s.ssim))))
                .collect();
            let n = traces.len();
            summary.push(SummaryRow {
                seed,
                method: method.name().into(),
                status: "ok".into(),
                images: n,
                mean_psnr: Some(report.mean_psnr()),
                mean_ssim: Some(report.mean_ssim()),
                mmd: report.mmd,
                mean_nfe: Some(traces.iter().map(|t| t.nfe as f64).sum::<f64>() / n as f64),
                max_nfe: traces.iter().map(|t| t.nfe).max(),
                budget_hits: Some(traces.iter().filter(|t| t.budget_hit).count()),
            });
            results.push(MethodResult {
                seed,
                method,
                report,
                traces: trace_rows,
            });
        }
    }
    let report = BenchReport { summary, results };
    if let Some(dir) = out_dir {
        write_bench_outputs(dir, &report)?;
    }
    Ok(report)
}

fn write_bench_outputs(dir: &Path, report: &BenchReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in &report.results {
        let sub = dir.join(format!("seed{}", r.seed));
        fs::create_dir_all(&sub)?;
        r.report.write_csv(fs::File::create(sub.join(format!("metrics_{}.csv", r.method)))?)?;
        write_trace_csv(fs::File::create(sub.join(format!("trace_{}.csv", r.method)))?, &r.traces)?;
    }
    fs::write(dir.join("summary.csv"), report.summary_csv()?)?;
    fs::write(dir.join("summary.txt"), report.summary_table())?;
    Ok(())
}

pub const TPRED_BIN_WIDTH: usize = 10;

/// Counts of predicted steps in bins of width 10 covering `0..=t_prime`; the
/// last bin holds predictions equal to `t_prime` when it is a multiple of 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpredHistogram {
    pub bin_width: usize,
    pub t_prime: usize,
    pub counts: Vec<usize>,
    /// Raw (unclamped) predictions above `t_prime`; these are counted in the
    /// last bin after clamping.
    pub raw_above: usize,
}

impl TpredHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn mass_above(&self, t: usize) -> usize {
        self.counts
            .iter()
            .enumerate()
            .filter(|(b, _)| b * self.bin_width > t)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["bin_start", "bin_end", "count"]).map_err(csv_err)?;
        for (b, c) in self.counts.iter().enumerate() {
            let start = b * self.bin_width;
            w.write_record([start.to_string(), (start + self.bin_width).to_string(), c.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn tpred_histogram(calibrator: &dyn StepCalibrator, images: &[ImagePatch]) -> Result<TpredHistogram> {
    let t_prime = calibrator.max_step();
    let preds = images
        .par_iter()
        .map(|x| {
            x.ensure_finite()?;
            let raw = calibrator.raw_predict(x)?;
            Ok((crate::calibrator::round_and_clamp(raw, t_prime), raw))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0; t_prime / TPRED_BIN_WIDTH + 1];
    let mut raw_above = 0;
    for (t, raw) in preds {
        counts[t / TPRED_BIN_WIDTH] += 1;
        if raw.round() > t_prime as f64 {
            raw_above += 1;
        }
    }
    Ok(TpredHistogram {
        bin_width: TPRED_BIN_WIDTH,
        t_prime,
        counts,
        raw_above,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpredConfig {
    pub shape: Shape,
    /// Images per class.
    pub per_class: usize,
    pub t: TRange,
    pub seed: u64,
}

impl Default for TpredConfig {
    fn default() -> Self {
        TpredConfig {
            shape: Shape::default(),
            per_class: 1000,
            t: TRange::Geometric {
                p: 0.03,
                max: 200,
                stratified: true,
            },
            seed: 11,
        }
    }
}

/// Degraded corpus with true steps drawn from `cfg.t` (whole-image
/// corruption).
pub fn tpred_corpus(cfg: &TpredConfig, schedule: &NoiseSchedule) -> Result<Vec<(ImagePatch, usize)>> {
    let clean = gen_two_class_corpus(cfg.shape, cfg.per_class, cfg.seed)?;
    degrade_corpus(&clean.images, &DegradeSpec::UniformT { t: cfg.t }, schedule, &SeededRng::new(cfg.seed, DEGRADE_TAG))
}

/// Per-image features: mean, variance and mean squared forward difference
/// (gradient energy), averaged over channels.
pub fn image_features(x: &ImagePatch) -> [f64; 3] {
    let (h, w) = (x.height(), x.width());
    let mut grad = 0.0;
    let mut n = 0usize;
    for c in 0..x.channels() {
        for y in 0..h {
            for xx in 0..w {
                let v = x.get(c, y, xx) as f64;
                if xx + 1 < w {
                    grad += (x.get(c, y, xx + 1) as f64 - v).powi(2);
                    n += 1;
                }
                if y + 1 < h {
                    grad += (x.get(c, y + 1, xx) as f64 - v).powi(2);
                    n += 1;
                }
            }
        }
    }
    [x.mean(), x.variance(), if n > 0 { grad / n as f64 } else { 0.0 }]
}

/// Logistic regression on standardized [`image_features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    pub feature_mean: [f64; 3],
    pub feature_std: [f64; 3],
    pub weights: [f64; 3],
    pub bias: f64,
}

const CLASSIFIER_ITERS: usize = 2000;
const CLASSIFIER_LR: f64 = 0.5;
const CLASSIFIER_L2: f64 = 1e-3;

impl ToyClassifier {
    pub const PARAM_COUNT: usize = 10;

    /// Full-batch gradient descent on the logistic loss; deterministic.
    pub fn fit(images: &[ImagePatch], labels: &[u8]) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Config(format!("{} images for {} labels", images.len(), labels.len())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Config("toy classifier labels must be 0 or 1".into()));
        }
        let feats: Vec<[f64; 3]> = images.par_iter().map(image_features).collect();
        let n = feats.len() as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for k in 0..3 {
            mean[k] = feats.iter().map(|f| f[k]).sum::<f64>() / n;
            std[k] = (feats.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        }
        let z: Vec<[f64; 3]> = feats
            .iter()
            .map(|f| [0, 1, 2].map(|k| (f[k] - mean[k]) / std[k]))
            .collect();
        let mut w = [0.0; 3];
        let mut b = 0.0;
        for _ in 0..CLASSIFIER_ITERS {
            let mut gw = [0.0; 3];
            let mut gb = 0.0;
            for (f, &y) in z.iter().zip(labels) {
                let p = sigmoid(b + w[0] * f[0] + w[1] * f[1] + w[2] * f[2]);
                let d = p - y as f64;
                for k in 0..3 {
                    gw[k] += d * f[k];
                }
                gb += d;
            }
            for k in 0..3 {
                w[k] -= CLASSIFIER_LR * (gw[k] / n + CLASSIFIER_L2 * w[k]);
            }
            b -= CLASSIFIER_LR * gb / n;
        }
        Ok(ToyClassifier {
            feature_mean: mean,
            feature_std: std,
            weights: w,
            bias: b,
        })
    }

    pub fn probability(&self, x: &ImagePatch) -> f64 {
        let f = image_features(x);
        let mut s = self.bias;
        for k in 0..3 {
            s += self.weights[k] * (f[k] - self.feature_mean[k]) / self.feature_std[k];
        }
        sigmoid(s)
    }

    pub fn predict(&self, x: &ImagePatch) -> u8 {
        (self.probability(x) >= 0.5) as u8
    }

    pub fn accuracy(&self, images: &[ImagePatch], labels: &[u8]) -> Result<f64> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Config(format!("{} images for {} labels", images.len(), labels.len())));
        }
        let correct = images
            .par_iter()
            .zip(labels)
            .filter(|(x, &l)| self.predict(x) == l)
            .count();
        Ok(correct as f64 / images.len() as f64)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub clean: f64,
    pub degraded: f64,
    pub restored: f64,
}

pub fn downstream_eval(
    classifier: &ToyClassifier,
    clean: &[ImagePatch],
    degraded: &[ImagePatch],
    restored: &[ImagePatch],
    labels: &[u8],
) -> Result<DownstreamReport> {
    if clean.len() != labels.len() || degraded.len() != labels.len() || restored.len() != labels.len() {
        return Err(Error::Config(format!(
            "label count {} does not match corpora of {}, {} and {} images",
            labels.len(),
            clean.len(),
            degraded.len(),
            restored.len()
        )));
    }
    Ok(DownstreamReport {
        clean: classifier.accuracy(clean, labels)?,
        degraded: classifier.accuracy(degraded, labels)?,
        restored: classifier.accuracy(restored, labels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub shape: Shape,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub t: usize,
    pub seed: u64,
    pub method: MethodId,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            shape: Shape::default(),
            train_per_class: 100,
            eval_per_class: 50,
            t: 100,
            seed: 21,
            method: MethodId::Rscd,
        }
    }
}

/// Trains the toy classifier on a clean corpus, corrupts an independent
/// evaluation corpus at step `cfg.t`, restores it with `cfg.method` and
/// scores all three versions.
pub fn run_downstream(cfg: &DownstreamConfig, models: &ModelSet, restore: &RestoreConfig) -> Result<DownstreamReport> {
    let restorer = cfg
        .method
        .restorer()
        .ok_or_else(|| Error::Config(format!("method `{}` is not implemented", cfg.method)))?;
    models.check(restorer, cfg.method.name())?;
    let train = gen_two_class_corpus(cfg.shape, cfg.train_per_class, cfg.seed)?;
    let classifier = ToyClassifier::fit(&train.images, &train.labels)?;
    let eval = gen_two_class_corpus(cfg.shape, cfg.eval_per_class, cfg.seed.wrapping_add(1))?;
    let spec = DegradeSpec::UniformT {
        t: TRange::Fixed { t: cfg.t },
    };
    let degraded: Vec<ImagePatch> = degrade_corpus(&eval.images, &spec, &models.schedule, &SeededRng::new(cfg.seed, DEGRADE_TAG))?
        .into_iter()
        .map(|(x, _)| x)
        .collect();
    let restored = degraded
        .par_iter()
        .enumerate()
        .map(|(i, x)| Ok(models.restore(restorer, x, restore, &mut SeededRng::new(cfg.seed, i as u64))?.0))
        .collect::<Result<Vec<_>>>()?;
    downstream_eval(&classifier, &eval.images, &degraded, &restored, &eval.labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZstackConfig {
    pub shape: Shape,
    pub profile: DepthProfile,
    /// Number of volumes; per-depth MMD needs at least 20.
    pub volumes: usize,
    pub seed: u64,
    pub method: MethodId,
}

impl Default for ZstackConfig {
    fn default() -> Self {
        ZstackConfig {
            shape: Shape::default(),
            profile: DepthProfile::default(),
            volumes: 20,
            seed: 31,
            method: MethodId::Rscd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub z: usize,
    pub depth_um: f64,
    pub t: usize,
    pub degraded_psnr: f64,
    pub restored_psnr: f64,
    pub degraded_mmd: Option<f64>,
    pub restored_mmd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZstackReport {
    pub rows: Vec<DepthRow>,
    /// Least-squares slope of mean PSNR against slice index, over slices
    /// with `t > 0` (slices at `t = 0` sit at the PSNR cap).
    pub degraded_slope: f64,
    pub restored_slope: f64,
}

impl ZstackReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Per-depth PSNR against the clean slices and MMD against an independent
/// clean slice population, for degraded and restored stacks.
pub fn zstack_eval(
    clean: &[Volume],
    degraded: &[Volume],
    restored: &[Volume],
    steps: &[usize],
    reference: &[ImagePatch],
) -> Result<ZstackReport> {
    if clean.is_empty() || clean.len() != degraded.len() || clean.len() != restored.len() {
        return Err(param_err!(
            "volume counts differ: {} clean, {} degraded, {} restored",
            clean.len(),
            degraded.len(),
            restored.len()
        ));
    }
    let depth = clean[0].len();
    if clean.iter().chain(degraded).chain(restored).any(|v| v.len() != depth) || steps.len() != depth {
        return Err(param_err!("all volumes and the profile must have {depth} slices"));
    }
    let mut rows = Vec::with_capacity(depth);
    for z in 0..depth {
        let slice = |vs: &[Volume]| vs.iter().map(|v| v.slices()[z].clone()).collect::<Vec<_>>();
        let (c, d, r) = (slice(clean), slice(degraded), slice(restored));
        let mean_psnr = |xs: &[ImagePatch]| -> Result<f64> {
            Ok(xs.iter().zip(&c).map(|(x, c)| psnr(x, c)).collect::<Result<Vec<_>>>()?.iter().sum::<f64>() / c.len() as f64)
        };
        let mmd = |xs: &[ImagePatch]| -> Result<Option<f64>> {
            if xs.len() >= MMD_MIN_SET && reference.len() >= MMD_MIN_SET {
                Ok(Some(mmd_rbf(xs, reference)?))
            } else {
                Ok(None)
            }
        };
        rows.push(DepthRow {
            z,
            depth_um: clean[0].depth_um(z),
            t: steps[z],
            degraded_psnr: mean_psnr(&d)?,
            restored_psnr: mean_psnr(&r)?,
            degraded_mmd: mmd(&d)?,
            restored_mmd: mmd(&r)?,
        });
    }
    let fit = |f: &dyn Fn(&DepthRow) -> f64| {
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.t > 0).map(|r| (r.z as f64, f(r))).collect();
        slope(&pts)
    };
    Ok(ZstackReport {
        degraded_slope: fit(&|r| r.degraded_psnr),
        restored_slope: fit(&|r| r.restored_psnr),
        rows,
    })
}

/// Builds `cfg.volumes` stacks (one clean image replicated through depth),
/// degrades them along the depth profile, restores every slice with
/// `cfg.method`, and evaluates the depth curves.
pub fn run_zstack(cfg: &ZstackConfig, models: &ModelSet, restore: &RestoreConfig) -> Result<ZstackReport> {
    let restorer = cfg
        .method
        .restorer()
        .ok_or_else(|| Error::Config(format!("method `{}` is not implemented", cfg.method)))?;
    models.check(restorer, cfg.method.name())?;
    let steps = cfg.profile.steps()?;
    if cfg.volumes == 0 {
        return Err(param_err!("at least one volume is required"));
    }
    let per_class = cfg.volumes.div_ceil(2);
    let mut sources = gen_two_class_corpus(cfg.shape, per_class, cfg.seed)?.images;
    sources.truncate(cfg.volumes);
    let reference = {
        let mut r = gen_two_class_corpus(cfg.shape, per_class, cfg.seed.wrapping_add(REFERENCE_TAG))?.images;
        r.truncate(cfg.volumes);
        r
    };
    let clean: Vec<Volume> = sources
        .iter()
        .map(|x| Volume::replicate(x, steps.len()))
        .collect::<Result<_>>()?;
    let degraded: Vec<Volume> = clean
        .iter()
        .enumerate()
        .map(|(v, c)| gen_zstack(c, &cfg.profile, &models.schedule, &SeededRng::new(cfg.seed, v as u64).derive(DEGRADE_TAG)))
        .collect::<Result<_>>()?;
    let depth = steps.len();
    let restored_slices = (0..cfg.volumes * depth)
        .into_par_iter()
        .map(|k| {
            let x = &degraded[k / depth].slices()[k % depth];
            Ok(models.restore(restorer, x, restore, &mut SeededRng::new(cfg.seed, k as u64))?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let restored: Vec<Volume> = restored_slices
        .chunks(depth)
        .zip(&clean)
        .map(|(s, c)| Volume::new(s.to_vec(), c.depth_start_um(), c.depth_step_um()))
        .collect::<Result<_>>()?;
    zstack_eval(&clean, &degraded, &restored, &steps, &reference)
}

/// SSIM is not part of the depth curves; exposed for callers that want it.
pub fn mean_ssim(xs: &[ImagePatch], refs: &[ImagePatch]) -> Result<f64> {
    let v = xs.iter().zip(refs).map(|(x, r)| ssim(x, r)).collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}
