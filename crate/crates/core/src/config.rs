//! Root experiment configuration (JSON).
//!
//! Every field has a default, so `{}` is a valid configuration and any
//! subset of keys can be overridden. Unknown keys are rejected at every
//! level this module owns.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{BenchConfig, DownstreamConfig, TpredConfig, ZstackConfig};
use crate::calibrator::{train_calibrator, CalibratorArch, CalibratorTrainConfig, NeuralStepCalibrator, DEFAULT_PATCH};
use crate::denoiser::{train_denoiser, DenoiserArch, DenoiserTrainConfig, TinyDenoiser, TrainReport};
use crate::error::{Error, Result};
use crate::image::{ImagePatch, SeededRng, Shape};
use crate::restore::{RestoreConfig, DEFAULT_CCDF_STEPS, DEFAULT_INTERVAL, DEFAULT_MEDIAN_KERNEL, DEFAULT_NFE_BUDGET};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::synth::gen_two_class_corpus;

/// Stream ids for the training runs, so the denoiser and both calibrators
/// draw independent randomness from one root seed.
const DENOISER_STREAM: u64 = 0xd0;
const CALIBRATOR_STREAM: u64 = 0xca;
const UNAUG_CALIBRATOR_STREAM: u64 = 0xcb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RootConfig {
    pub seed: u64,
    pub schedule: ScheduleSpec,
    pub training: TrainingConfig,
    pub restore: RestoreSection,
    pub corpus: CorpusSection,
    pub checkpoints: CheckpointPaths,
    pub bench: BenchConfig,
    pub downstream: DownstreamConfig,
    pub zstack: ZstackConfig,
    pub tpred: TpredConfig,
}

impl Default for RootConfig {
    fn default() -> Self {
        RootConfig {
            seed: 0,
            schedule: ScheduleSpec::default(),
            training: TrainingConfig::default(),
            restore: RestoreSection::default(),
            corpus: CorpusSection::default(),
            checkpoints: CheckpointPaths::default(),
            bench: BenchConfig::default(),
            downstream: DownstreamConfig::default(),
            zstack: ZstackConfig::default(),
            tpred: TpredConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Largest step the deployed models handle (`T'`); also the restoration
    /// bound and the calibrator clamp.
    pub t_prime: usize,
    pub denoiser: DenoiserSection,
    pub calibrator: CalibratorSection,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            t_prime: 200,
            denoiser: DenoiserSection::default(),
            calibrator: CalibratorSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub arch: DenoiserArch,
    pub train: DenoiserTrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibratorSection {
    pub arch: CalibratorArch,
    pub train: CalibratorTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreSection {
    pub interval: usize,
    pub nfe_budget: u64,
    pub noise_at_final_step: bool,
    pub clamp_recalibration: bool,
    pub ccdf_steps: usize,
    pub median_kernel: usize,
    pub nonparametric_patch: usize,
}

impl Default for RestoreSection {
    fn default() -> Self {
        let r = RestoreConfig::default();
        RestoreSection {
            interval: DEFAULT_INTERVAL,
            nfe_budget: DEFAULT_NFE_BUDGET,
            noise_at_final_step: r.noise_at_final_step,
            clamp_recalibration: r.clamp_recalibration,
            ccdf_steps: DEFAULT_CCDF_STEPS,
            median_kernel: DEFAULT_MEDIAN_KERNEL,
            nonparametric_patch: DEFAULT_PATCH,
        }
    }
}

/// Clean training corpus (two classes, interleaved).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub shape: Shape,
    pub train_per_class: usize,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            shape: Shape::default(),
            train_per_class: 200,
            seed: 1,
        }
    }
}

/// Checkpoint directories; command-line flags override these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    pub denoiser: Option<PathBuf>,
    pub calibrator: Option<PathBuf>,
    pub unaug_calibrator: Option<PathBuf>,
    pub linear_denoiser: Option<PathBuf>,
    pub linear_calibrator: Option<PathBuf>,
}

impl RootConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RootConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Restoration settings with the bound set to `T'`.
    pub fn restore_config(&self) -> RestoreConfig {
        RestoreConfig {
            interval: self.restore.interval,
            max_steps: self.training.t_prime,
            nfe_budget: self.restore.nfe_budget,
            noise_at_final_step: self.restore.noise_at_final_step,
            clamp_recalibration: self.restore.clamp_recalibration,
        }
    }

    /// Applies a command-line seed override to every seed in the document.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
        self.bench.seeds = vec![seed];
        self.downstream.seed = seed;
        self.zstack.seed = seed;
        self.tpred.seed = seed;
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    /// The clean two-class training corpus described by `corpus`.
    pub fn training_corpus(&self) -> Result<Vec<ImagePatch>> {
        Ok(gen_two_class_corpus(self.corpus.shape, self.corpus.train_per_class, self.corpus.seed)?.images)
    }

    /// Trains a fresh denoiser on `corpus` with steps up to `T'`.
    pub fn train_denoiser(&self, schedule: &NoiseSchedule, corpus: &[ImagePatch]) -> Result<(TinyDenoiser, TrainReport)> {
        let mut rng = SeededRng::new(self.seed, DENOISER_STREAM);
        let d = &self.training.denoiser;
        let mut model = TinyDenoiser::new(d.arch, schedule.spec(), &mut rng);
        let report = train_denoiser(&mut model, corpus, schedule, self.training.t_prime, &d.train, &mut rng)?;
        Ok((model, report))
    }

    /// Trains a fresh calibrator clamped to `T'`; `augment` overrides the
    /// configured two-region augmentation switch.
    pub fn train_calibrator(
        &self,
        schedule: &NoiseSchedule,
        corpus: &[ImagePatch],
        augment: bool,
    ) -> Result<(NeuralStepCalibrator, TrainReport)> {
        let stream = if augment { CALIBRATOR_STREAM } else { UNAUG_CALIBRATOR_STREAM };
        let mut rng = SeededRng::new(self.seed, stream);
        let c = &self.training.calibrator;
        let mut model = NeuralStepCalibrator::new(c.arch, self.training.t_prime, schedule.spec(), &mut rng);
        let cfg = CalibratorTrainConfig { augment, ..c.train };
        let report = train_calibrator(&mut model, corpus, schedule, &cfg, &mut rng)?;
        Ok((model, report))
    }

    /// Cross-field checks; every failure is a config error.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        let schedule = self.schedule.build().map_err(as_config)?;
        let t = &self.training;
        if t.t_prime == 0 || t.t_prime > schedule.steps() {
            return Err(Error::Config(format!(
                "training.t_prime = {} must lie in 1..={}",
                t.t_prime,
                schedule.steps()
            )));
        }
        if t.calibrator.train.t_max == 0 || t.calibrator.train.t_max > t.t_prime {
            return Err(Error::Config(format!(
                "training.calibrator.train.t_max = {} must lie in 1..={}",
                t.calibrator.train.t_max, t.t_prime
            )));
        }
        if t.denoiser.arch.channels != self.corpus.shape.channels || t.calibrator.arch.channels != self.corpus.shape.channels {
            return Err(Error::Config("model channel counts must match corpus.shape.channels".into()));
        }
        for (name, v) in [
            ("training.denoiser.train.epochs", t.denoiser.train.epochs),
            ("training.denoiser.train.batch_size", t.denoiser.train.batch_size),
            ("training.calibrator.train.epochs", t.calibrator.train.epochs),
            ("training.calibrator.train.batch_size", t.calibrator.train.batch_size),
            ("corpus.train_per_class", self.corpus.train_per_class),
            ("restore.ccdf_steps", self.restore.ccdf_steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, lr) in [
            ("training.denoiser.train.lr", t.denoiser.train.lr),
            ("training.calibrator.train.lr", t.calibrator.train.lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be a positive number")));
            }
        }
        if self.restore.median_kernel % 2 == 0 {
            return Err(Error::Config("restore.median_kernel must be odd".into()));
        }
        if self.restore.nonparametric_patch < 2 {
            return Err(Error::Config("restore.nonparametric_patch must be at least 2".into()));
        }
        self.restore_config().validate().map_err(as_config)?;
        self.bench.validate(t.t_prime).map_err(as_config)?;
        self.tpred.t.validate(t.t_prime).map_err(as_config)?;
        self.zstack.profile.steps().map_err(as_config)?;
        if self.downstream.t == 0 || self.downstream.t > t.t_prime {
            return Err(Error::Config(format!("downstream.t must lie in 1..={}", t.t_prime)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let cfg = RootConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RootConfig::default());
        assert_eq!(cfg.restore_config().max_steps, 200);
        assert_eq!(cfg.restore_config().interval, 10);
        assert_eq!(cfg.restore_config().nfe_budget, 400);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RootConfig::default();
        assert_eq!(RootConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_override() {
        let cfg = RootConfig::from_json(
            r#"{
                "restore": {"interval": 5},
                "training": {"t_prime": 150, "calibrator": {"train": {"t_max": 150}}},
                "bench": {"degrade": {"kind": "uniform_t", "t": {"dist": "uniform", "lo": 1, "hi": 150}}},
                "tpred": {"t": {"dist": "fixed", "t": 40}}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.restore_config().interval, 5);
        assert_eq!(cfg.restore_config().max_steps, 150);
        assert_eq!(cfg.restore.nfe_budget, 400);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            r#"{"unknown": 1}"#,
            r#"{"restore": {"intervall": 5}}"#,
            r#"{"restore": {"interval": 0}}"#,
            r#"{"restore": {"nfe_budget": 100}}"#,
            r#"{"training": {"t_prime": 0}}"#,
            r#"{"training": {"t_prime": 2000}}"#,
            r#"{"training": {"t_prime": 100}}"#,
            r#"{"restore": {"median_kernel": 4}}"#,
            r#"{"bench": {"roster": []}}"#,
            r#"{"bench": {"roster": ["nope"]}}"#,
            r#"{"schedule": {"kind": "cosine", "s": 0.008, "steps": 0}}"#,
            r#"{"zstack": {"profile": {"profile": "explicit", "steps": [5, 3]}}}"#,
            "not json",
        ] {
            let err = RootConfig::from_json(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err:?}");
        }
    }

    #[test]
    fn missing_file_is_config_error() {
        assert!(matches!(RootConfig::load("/nonexistent/cfg.json"), Err(Error::Config(_))));
    }
}
