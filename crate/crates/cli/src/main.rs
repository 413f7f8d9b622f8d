//! `stepcal` command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage, validation or configuration
//! errors (including missing checkpoints, detected before any work), 2 for
//! failures while a pipeline runs.

use std::io::Write;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stepcal::bench::{
    run_benchmark, run_downstream, run_zstack, tpred_corpus, tpred_histogram, write_trace_csv, LinearModels, MethodId,
    ModelSet, Restorer, TraceRow, CalibratorChoice,
};
use stepcal::checkpoint;
use stepcal::config::RootConfig;
use stepcal::denoiser::{AnalyticGmDenoiser, Denoiser, GaussianMixture};
use stepcal::diffusion::{generate, NfeCounter, ReverseStepConfig};
use stepcal::image::{load_image, save_image, ImagePatch, SeededRng};
use stepcal::synth::{degrade_corpus, gen_two_class_corpus, load_corpus, save_corpus, DegradeSpec, TRange};
use stepcal::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "stepcal", version, about = "Step-calibrated diffusion restoration toolkit")]
struct Cli {
    /// JSON configuration file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-class corpus, optionally degraded.
    GenData(GenDataArgs),
    /// Train the noise-prediction network.
    TrainDenoiser(TrainDenoiserArgs),
    /// Train the step calibrator.
    TrainCalibrator(TrainCalibratorArgs),
    /// Restore one image (PFT or PNG) or every image in a directory.
    Restore(RestoreArgs),
    /// Draw samples by full ancestral sampling.
    Sample(SampleArgs),
    /// Run the method-ordering benchmark.
    Bench(BenchArgs),
    /// Depth-dependent degradation and restoration curves.
    Zstack(ZstackArgs),
    /// Histogram of predicted steps on a degraded corpus.
    TpredHist(TpredArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DegradeKind {
    Clean,
    Uniform,
    TwoRegion,
    Geometric,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Images per class (defaults to corpus.train_per_class).
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long, value_enum, default_value_t = DegradeKind::Clean)]
    degrade: DegradeKind,
    /// Largest step for uniform and two-region degradation (defaults to T').
    #[arg(long)]
    t_max: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    Cosine,
    Linear,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Corpus directory from `gen-data`; generated from the config if absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides the configured schedule kind (default parameters).
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainDenoiserArgs {
    #[command(flatten)]
    common: TrainArgs,
}

#[derive(Args, Debug)]
struct TrainCalibratorArgs {
    #[command(flatten)]
    common: TrainArgs,
    /// Train without two-region augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug, Default)]
/// Checkpoint directories; each falls back to its `checkpoints.*` config key.
struct CheckpointArgs {
    /// Denoiser checkpoint (cosine schedule)
    #[arg(long)]
    denoiser: Option<PathBuf>,
    /// Augmented step calibrator
    #[arg(long)]
    calibrator: Option<PathBuf>,
    /// Calibrator trained without augmentation
    #[arg(long)]
    unaug_calibrator: Option<PathBuf>,
    /// Denoiser trained on the linear schedule
    #[arg(long)]
    linear_denoiser: Option<PathBuf>,
    /// Calibrator trained on the linear schedule
    #[arg(long)]
    linear_calibrator: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    /// Input image (.pft or .png) or a directory of them.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file, or directory when the input is a directory.
    #[arg(long)]
    out: PathBuf,
    /// rscd, no_recal, fixed, ccdf, median, or any benchmark method id.
    #[arg(long, default_value = "rscd")]
    method: String,
    /// Step count for `fixed` and `ccdf`.
    #[arg(long)]
    steps: Option<usize>,
    /// Window size for `median`.
    #[arg(long)]
    kernel: Option<usize>,
    /// Recalibration interval for `rscd` (defaults to restore.interval).
    #[arg(long)]
    interval: Option<usize>,
    #[command(flatten)]
    checkpoints: CheckpointArgs,
    /// CSV file receiving one trace row per restored image.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Output directory for `NNNNN.pft` samples.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Trained denoiser; without it, the analytic denoiser for the Gaussian
    /// prior given by --prior-mean/--prior-var is used.
    #[arg(long)]
    denoiser: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    prior_mean: f64,
    #[arg(long, default_value_t = 0.01)]
    prior_var: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Output directory for per-image, trace and summary files.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated method ids (defaults to bench.roster).
    #[arg(long, value_delimiter = ',')]
    roster: Option<Vec<String>>,
    /// Also run the toy downstream classification check.
    #[arg(long)]
    downstream: bool,
    #[command(flatten)]
    checkpoints: CheckpointArgs,
}

#[derive(Args, Debug)]
struct ZstackArgs {
    /// Output CSV with one row per depth.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    method: Option<String>,
    #[command(flatten)]
    checkpoints: CheckpointArgs,
}

#[derive(Args, Debug)]
struct TpredArgs {
    /// Output CSV of bin counts.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    calibrator: PathBuf,
    /// Corpus directory to histogram; defaults to the configured geometric corpus.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RootConfig::load(path)?,
        None => RootConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    if cli.print_config {
        // a closed pipe (`| head`) is not an error worth reporting
        let _ = writeln!(std::io::stdout(), "{}", cfg.to_json());
        return Ok(());
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))?;
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given; see --help".into()));
    };
    match command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::TrainDenoiser(a) => train_denoiser_cmd(cfg, a),
        Command::TrainCalibrator(a) => train_calibrator_cmd(cfg, a),
        Command::Restore(a) => restore_cmd(&cfg, a),
        Command::Sample(a) => sample_cmd(&cfg, a),
        Command::Bench(a) => bench_cmd(cfg, a),
        Command::Zstack(a) => zstack_cmd(cfg, a),
        Command::TpredHist(a) => tpred_cmd(&cfg, a),
    }
}

fn gen_data(cfg: &RootConfig, a: GenDataArgs) -> Result<()> {
    let per_class = a.per_class.unwrap_or(cfg.corpus.train_per_class);
    let corpus = gen_two_class_corpus(cfg.corpus.shape, per_class, cfg.corpus.seed)?;
    let t_max = a.t_max.unwrap_or(cfg.training.t_prime);
    let uniform = TRange::Uniform { lo: 1, hi: t_max };
    let spec = match a.degrade {
        DegradeKind::Clean => None,
        DegradeKind::Uniform => Some(DegradeSpec::UniformT { t: uniform }),
        DegradeKind::TwoRegion => Some(DegradeSpec::TwoRegion {
            t: uniform,
            mask: stepcal::image::MaskKind::HalfPlane,
        }),
        DegradeKind::Geometric => Some(DegradeSpec::UniformT { t: cfg.tpred.t }),
    };
    match spec {
        None => save_corpus(&a.out, &corpus.images, Some(&corpus.labels), None)?,
        Some(spec) => {
            let schedule = cfg.noise_schedule()?;
            let lq = degrade_corpus(&corpus.images, &spec, &schedule, &SeededRng::new(cfg.seed, 0xde6))?;
            let (images, steps): (Vec<_>, Vec<_>) = lq.into_iter().unzip();
            save_corpus(&a.out, &images, Some(&corpus.labels), Some(&steps))?;
        }
    }
    println!("wrote {} images to {}", corpus.images.len(), a.out.display());
    Ok(())
}

fn apply_train_overrides(cfg: &mut RootConfig, a: &TrainArgs) -> Result<Vec<ImagePatch>> {
    if let Some(kind) = a.schedule {
        cfg.schedule = match kind {
            ScheduleArg::Cosine => stepcal::schedule::NoiseSchedule::cosine(cfg.schedule.steps)?.spec(),
            ScheduleArg::Linear => stepcal::schedule::NoiseSchedule::linear(cfg.schedule.steps)?.spec(),
        };
    }
    if let Some(e) = a.epochs {
        if e == 0 {
            return Err(Error::Config("--epochs must be at least 1".into()));
        }
        cfg.training.denoiser.train.epochs = e;
        cfg.training.calibrator.train.epochs = e;
    }
    match &a.data {
        Some(dir) => {
            require_dir(dir, "corpus directory")?;
            Ok(load_corpus(dir)?.1)
        }
        None => cfg.training_corpus(),
    }
}

fn train_denoiser_cmd(mut cfg: RootConfig, a: TrainDenoiserArgs) -> Result<()> {
    let corpus = apply_train_overrides(&mut cfg, &a.common)?;
    let schedule = cfg.noise_schedule()?;
    let (model, report) = cfg.train_denoiser(&schedule, &corpus)?;
    checkpoint::save_denoiser(&a.common.out, &model)?;
    print_losses(&report.epoch_losses);
    println!("saved denoiser to {}", a.common.out.display());
    Ok(())
}

fn train_calibrator_cmd(mut cfg: RootConfig, a: TrainCalibratorArgs) -> Result<()> {
    let corpus = apply_train_overrides(&mut cfg, &a.common)?;
    let schedule = cfg.noise_schedule()?;
    let augment = cfg.training.calibrator.train.augment && !a.no_augment;
    let (model, report) = cfg.train_calibrator(&schedule, &corpus, augment)?;
    checkpoint::save_calibrator(&a.common.out, &model)?;
    print_losses(&report.epoch_losses);
    println!("saved calibrator to {}", a.common.out.display());
    Ok(())
}

fn print_losses(losses: &[f64]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("epochs: {}  first loss: {first:.6}  final loss: {last:.6}", losses.len());
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn require_checkpoint(path: &Path) -> Result<()> {
    if checkpoint::exists(path) {
        Ok(())
    } else {
        Err(Error::Config(format!("checkpoint {} not found", path.display())))
    }
}

/// Resolves command-line and config checkpoint paths, verifies that every
/// path exists, and loads the models. Runs before any computation.
fn load_models(cfg: &RootConfig, a: &CheckpointArgs) -> Result<ModelSet> {
    let c = &cfg.checkpoints;
    let pick = |flag: &Option<PathBuf>, conf: &Option<PathBuf>| flag.clone().or_else(|| conf.clone());
    let paths = [
        pick(&a.denoiser, &c.denoiser),
        pick(&a.calibrator, &c.calibrator),
        pick(&a.unaug_calibrator, &c.unaug_calibrator),
        pick(&a.linear_denoiser, &c.linear_denoiser),
        pick(&a.linear_calibrator, &c.linear_calibrator),
    ];
    for p in paths.iter().flatten() {
        require_checkpoint(p)?;
    }
    let [den, cal, unaug, lin_den, lin_cal] = paths;
    let denoiser = den.map(checkpoint::load_denoiser).transpose()?;
    let schedule = match &denoiser {
        Some(d) => d.schedule.build()?,
        None => cfg.noise_schedule()?,
    };
    let mut models = ModelSet::new(schedule);
    models.nonparametric_patch = cfg.restore.nonparametric_patch;
    models.denoiser = denoiser;
    models.calibrator = cal.map(checkpoint::load_calibrator).transpose()?;
    models.unaug_calibrator = unaug.map(checkpoint::load_calibrator).transpose()?;
    for c in models.calibrator.iter().chain(&models.unaug_calibrator) {
        if c.schedule != models.schedule.spec() {
            return Err(Error::Config("calibrator and denoiser were trained under different schedules".into()));
        }
    }
    models.linear = match (lin_den, lin_cal) {
        (Some(d), Some(c)) => {
            let denoiser = checkpoint::load_denoiser(d)?;
            let calibrator = checkpoint::load_calibrator(c)?;
            Some(LinearModels {
                schedule: denoiser.schedule.build()?,
                denoiser,
                calibrator,
            })
        }
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "--linear-denoiser and --linear-calibrator must be given together".into(),
            ))
        }
    };
    Ok(models)
}

fn parse_restorer(a: &RestoreArgs) -> Result<Restorer> {
    let need_steps = || {
        a.steps
            .ok_or_else(|| Error::Config(format!("--method {} needs --steps", a.method)))
    };
    Ok(match a.method.as_str() {
        "fixed" => Restorer::Fixed(need_steps()?),
        "ccdf" => Restorer::Ccdf(need_steps()?),
        "median" => Restorer::Median(a.kernel.unwrap_or(cfg_median_default())),
        name => {
            let id: MethodId = name.parse().map_err(|_| Error::Config(format!("unknown method `{name}`")))?;
            let r = id
                .restorer()
                .ok_or_else(|| Error::Config(format!("method `{name}` is not implemented")))?;
            match r {
                // With explicit checkpoints the linear variant is plain rscd
                // on linear-schedule models.
                Restorer::Rscd {
                    calibrator: CalibratorChoice::LinearSchedule,
                    interval,
                } => Restorer::Rscd {
                    interval,
                    calibrator: CalibratorChoice::Augmented,
                },
                Restorer::Rscd { interval: None, calibrator } => Restorer::Rscd {
                    interval: a.interval,
                    calibrator,
                },
                other => other,
            }
        }
    })
}

fn cfg_median_default() -> usize {
    stepcal::restore::DEFAULT_MEDIAN_KERNEL
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pft" | "png")))
        .collect();
    files.sort();
    Ok(files)
}

fn restore_cmd(cfg: &RootConfig, a: RestoreArgs) -> Result<()> {
    let restorer = parse_restorer(&a)?;
    if !a.input.exists() {
        return Err(Error::Config(format!("input {} does not exist", a.input.display())));
    }
    let models = load_models(cfg, &a.checkpoints)?;
    models.check(restorer, &a.method)?;
    let restore = cfg.restore_config();
    let (inputs, outputs): (Vec<PathBuf>, Vec<PathBuf>) = if a.input.is_dir() {
        let files = image_files(&a.input)?;
        fs::create_dir_all(&a.out)?;
        let outs = files.iter().map(|f| a.out.join(f.file_name().expect("file"))).collect();
        (files, outs)
    } else {
        (vec![a.input.clone()], vec![a.out.clone()])
    };
    let images = inputs.iter().map(load_image).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(images.len());
    for (i, (x, out)) in images.iter().zip(&outputs).enumerate() {
        let mut rng = SeededRng::new(cfg.seed, i as u64);
        let (y, trace) = models.restore(restorer, x, &restore, &mut rng)?;
        save_image(out, &y)?;
        rows.push(TraceRow::new(i, &a.method, &trace, None));
        println!(
            "{} -> {}  nfe={}  steps={:?}{}",
            inputs[i].display(),
            out.display(),
            trace.nfe,
            trace.remaining_sequence(),
            if trace.budget_hit { "  (budget hit)" } else { "" }
        );
    }
    if let Some(path) = &a.trace {
        write_trace_csv(fs::File::create(path)?, &rows)?;
    }
    Ok(())
}

fn sample_cmd(cfg: &RootConfig, a: SampleArgs) -> Result<()> {
    let loaded;
    let analytic;
    let (denoiser, schedule): (&dyn Denoiser, _) = match &a.denoiser {
        Some(path) => {
            require_checkpoint(path)?;
            loaded = checkpoint::load_denoiser(path)?;
            (&loaded, loaded.schedule.build()?)
        }
        None => {
            let schedule = cfg.noise_schedule()?;
            analytic = AnalyticGmDenoiser::new(GaussianMixture::single(a.prior_mean, a.prior_var)?, schedule.clone());
            (&analytic, schedule)
        }
    };
    fs::create_dir_all(&a.out)?;
    let mut nfe = NfeCounter::default();
    for i in 0..a.count {
        let mut rng = SeededRng::new(cfg.seed, i as u64);
        let x = generate(denoiser, &schedule, cfg.corpus.shape, ReverseStepConfig::default(), &mut rng, &mut nfe)?;
        save_image(a.out.join(format!("{i:05}.pft")), &x)?;
    }
    println!("wrote {} samples ({} network evaluations)", a.count, nfe.get());
    Ok(())
}

fn bench_cmd(mut cfg: RootConfig, a: BenchArgs) -> Result<()> {
    if let Some(names) = &a.roster {
        cfg.bench.roster = names
            .iter()
            .map(|n| n.parse::<MethodId>().map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<_>>()?;
        cfg.validate()?;
    }
    let models = load_models(&cfg, &a.checkpoints)?;
    let restore = cfg.restore_config();
    if a.downstream {
        let m = cfg.downstream.method;
        models.check(
            m.restorer().ok_or_else(|| Error::Config(format!("method `{m}` is not implemented")))?,
            m.name(),
        )?;
    }
    let report = run_benchmark(&cfg.bench, &models, &restore, Some(&a.out))?;
    print!("{}", report.summary_table());
    if a.downstream {
        let d = run_downstream(&cfg.downstream, &models, &restore)?;
        println!(
            "downstream accuracy at t={}: clean {:.3}  degraded {:.3}  restored {:.3}",
            cfg.downstream.t, d.clean, d.degraded, d.restored
        );
        fs::write(a.out.join("downstream.json"), serde_json::to_string_pretty(&d).expect("serializes"))?;
    }
    Ok(())
}

fn zstack_cmd(mut cfg: RootConfig, a: ZstackArgs) -> Result<()> {
    if let Some(m) = &a.method {
        cfg.zstack.method = m.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    }
    let models = load_models(&cfg, &a.checkpoints)?;
    let report = run_zstack(&cfg.zstack, &models, &cfg.restore_config())?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    report.write_csv(fs::File::create(&a.out)?)?;
    println!(
        "depth-curve slope (dB per slice): degraded {:.3}, restored {:.3}",
        report.degraded_slope, report.restored_slope
    );
    Ok(())
}

fn tpred_cmd(cfg: &RootConfig, a: TpredArgs) -> Result<()> {
    require_checkpoint(&a.calibrator)?;
    let calibrator = checkpoint::load_calibrator(&a.calibrator)?;
    let images = match &a.data {
        Some(dir) => {
            require_dir(dir, "corpus directory")?;
            load_corpus(dir)?.1
        }
        None => {
            let schedule = calibrator.schedule.build()?;
            tpred_corpus(&cfg.tpred, &schedule)?.into_iter().map(|(x, _)| x).collect()
        }
    };
    let hist = tpred_histogram(&calibrator, &images)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    hist.write_csv(fs::File::create(&a.out)?)?;
    for (b, c) in hist.counts.iter().enumerate() {
        println!("{:>3}-{:<3} {c}", b * hist.bin_width, (b + 1) * hist.bin_width);
    }
    Ok(())
}
