//! Shared fixture: the five models trained from the default configuration,
//! cached under the cargo target tmp directory and keyed by the
//! training-relevant configuration blocks.

#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use stepcal::bench::{LinearModels, ModelSet};
use stepcal::checkpoint;
use stepcal::config::RootConfig;
use stepcal::schedule::NoiseSchedule;
use stepcal::Result;

pub struct Fixture {
    pub cfg: RootConfig,
    pub models: ModelSet,
    /// Seconds spent training the two cosine-schedule calibrators, or `None`
    /// when they came from the cache.
    pub calibrator_train_secs: Option<f64>,
}

fn cache_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-models")
}

fn linear_config(cfg: &RootConfig) -> Result<RootConfig> {
    let mut lin = cfg.clone();
    lin.schedule = NoiseSchedule::linear(cfg.schedule.steps)?.spec();
    Ok(lin)
}

/// Trains (or loads) the five models used by the suite. Models are always
/// reloaded from their checkpoints so cached and fresh runs see identical
/// (f32-stored) parameters.
pub fn fixture() -> Result<Fixture> {
    let cfg = RootConfig::default();
    let root = cache_root();
    // only the blocks that influence training
    let key = serde_json::to_string_pretty(&(cfg.seed, &cfg.schedule, &cfg.training, &cfg.corpus)).expect("serializes");
    let names = ["denoiser", "calibrator", "unaug_calibrator", "linear_denoiser", "linear_calibrator"];
    let cached = fs::read_to_string(root.join("config.json")).ok().as_deref() == Some(key.as_str())
        && names.iter().all(|n| checkpoint::exists(root.join(n)));
    let mut calibrator_train_secs = None;
    if !cached {
        eprintln!("training acceptance models (cached afterwards in {})", root.display());
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root)?;
        let schedule = cfg.noise_schedule()?;
        let corpus = cfg.training_corpus()?;
        let (den, _) = cfg.train_denoiser(&schedule, &corpus)?;
        checkpoint::save_denoiser(root.join("denoiser"), &den)?;
        let start = Instant::now();
        let (cal, _) = cfg.train_calibrator(&schedule, &corpus, true)?;
        let (unaug, _) = cfg.train_calibrator(&schedule, &corpus, false)?;
        calibrator_train_secs = Some(start.elapsed().as_secs_f64());
        checkpoint::save_calibrator(root.join("calibrator"), &cal)?;
        checkpoint::save_calibrator(root.join("unaug_calibrator"), &unaug)?;
        let lin = linear_config(&cfg)?;
        let lin_schedule = lin.noise_schedule()?;
        let (lden, _) = lin.train_denoiser(&lin_schedule, &corpus)?;
        let (lcal, _) = lin.train_calibrator(&lin_schedule, &corpus, true)?;
        checkpoint::save_denoiser(root.join("linear_denoiser"), &lden)?;
        checkpoint::save_calibrator(root.join("linear_calibrator"), &lcal)?;
        fs::write(root.join("config.json"), &key)?;
    }
    let mut models = ModelSet::new(cfg.noise_schedule()?);
    models.denoiser = Some(checkpoint::load_denoiser(root.join("denoiser"))?);
    models.calibrator = Some(checkpoint::load_calibrator(root.join("calibrator"))?);
    models.unaug_calibrator = Some(checkpoint::load_calibrator(root.join("unaug_calibrator"))?);
    let denoiser = checkpoint::load_denoiser(root.join("linear_denoiser"))?;
    models.linear = Some(LinearModels {
        schedule: denoiser.schedule.build()?,
        denoiser,
        calibrator: checkpoint::load_calibrator(root.join("linear_calibrator"))?,
    });
    Ok(Fixture {
        cfg,
        models,
        calibrator_train_secs,
    })
}

