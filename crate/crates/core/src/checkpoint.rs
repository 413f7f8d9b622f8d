//! Model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.txt` (one `key=value` per
//! line: model kind, layer widths, time-embedding size, schedule) and one PFT
//! tensor per parameter array. Parameters are stored as `f32`, so a reloaded
//! model equals the saved one rounded to single precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::calibrator::{CalibratorArch, NeuralStepCalibrator};
use crate::denoiser::{DenoiserArch, TinyDenoiser};
use crate::error::{Error, Result};
use crate::image::{SeededRng, Tensor};
use crate::nn::Dense;
use crate::schedule::{ScheduleKind, ScheduleSpec};

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT_TAG: &str = "stepcal-checkpoint-1";
const DENOISER_KIND: &str = "tiny_denoiser";
const CALIBRATOR_KIND: &str = "neural_step_calibrator";

type Manifest = BTreeMap<String, String>;

fn schedule_entries(m: &mut Manifest, spec: &ScheduleSpec) {
    m.insert("schedule_kind".into(), spec.kind.name().into());
    m.insert("schedule_steps".into(), spec.steps.to_string());
    match spec.kind {
        ScheduleKind::Cosine { s } => {
            m.insert("schedule_s".into(), s.to_string());
        }
        ScheduleKind::Linear { beta_min, beta_max } => {
            m.insert("schedule_beta_min".into(), beta_min.to_string());
            m.insert("schedule_beta_max".into(), beta_max.to_string());
        }
    }
}

fn get<'a>(m: &'a Manifest, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks `{key}`")))
}

fn get_num<T: std::str::FromStr>(m: &Manifest, key: &str) -> Result<T> {
    let v = get(m, key)?;
    v.parse()
        .map_err(|_| Error::Format(format!("checkpoint manifest: bad value `{v}` for `{key}`")))
}

fn read_schedule(m: &Manifest) -> Result<ScheduleSpec> {
    let kind = match get(m, "schedule_kind")? {
        "cosine" => ScheduleKind::Cosine {
            s: get_num(m, "schedule_s")?,
        },
        "linear" => ScheduleKind::Linear {
            beta_min: get_num(m, "schedule_beta_min")?,
            beta_max: get_num(m, "schedule_beta_max")?,
        },
        other => return Err(Error::Format(format!("unknown schedule kind `{other}` in checkpoint"))),
    };
    let spec = ScheduleSpec {
        kind,
        steps: get_num(m, "schedule_steps")?,
    };
    spec.build()?;
    Ok(spec)
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let mut text = String::new();
    for (k, v) in m {
        let _ = writeln!(text, "{k}={v}");
    }
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut m = Manifest::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{MANIFEST_FILE} line {}: expected key=value", i + 1)))?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    if get(&m, "format")? != FORMAT_TAG {
        return Err(Error::Format(format!("unsupported checkpoint format `{}`", m["format"])));
    }
    Ok(m)
}

fn save_dense(dir: &Path, name: &str, d: &Dense) -> Result<()> {
    let w = Tensor::new(vec![d.inputs(), d.outputs()], d.weight.iter().map(|&v| v as f32).collect())?;
    w.write(dir.join(format!("{name}.weight.pft")))?;
    let b = Tensor::new(vec![d.outputs()], d.bias.iter().map(|&v| v as f32).collect())?;
    b.write(dir.join(format!("{name}.bias.pft")))
}

fn load_dense(dir: &Path, name: &str, inputs: usize, outputs: usize) -> Result<Dense> {
    let w = Tensor::read(dir.join(format!("{name}.weight.pft")))?;
    let b = Tensor::read(dir.join(format!("{name}.bias.pft")))?;
    if w.dims != [inputs, outputs] || b.dims != [outputs] {
        return Err(Error::Format(format!(
            "layer `{name}` has shape {:?}/{:?}, manifest implies [{inputs}, {outputs}]",
            w.dims, b.dims
        )));
    }
    Ok(Dense {
        weight: Array2::from_shape_vec((inputs, outputs), w.data.iter().map(|&v| v as f64).collect())
            .expect("checked shape"),
        bias: Array1::from_iter(b.data.iter().map(|&v| v as f64)),
    })
}

fn denoiser_layers(m: &TinyDenoiser) -> [(&'static str, &Dense); 4] {
    [
        ("trunk.window", &m.trunk.window),
        ("trunk.hidden", &m.trunk.hidden),
        ("time", &m.time),
        ("out", &m.out),
    ]
}

fn calibrator_layers(m: &NeuralStepCalibrator) -> [(&'static str, &Dense); 4] {
    [
        ("trunk.window", &m.trunk.window),
        ("trunk.hidden", &m.trunk.hidden),
        ("head1", &m.head1),
        ("head2", &m.head2),
    ]
}

fn base_manifest(kind: &str, channels: usize, width1: usize, width2: usize, schedule: &ScheduleSpec) -> Manifest {
    let mut m = Manifest::new();
    m.insert("format".into(), FORMAT_TAG.into());
    m.insert("model".into(), kind.into());
    m.insert("channels".into(), channels.to_string());
    m.insert("width1".into(), width1.to_string());
    m.insert("width2".into(), width2.to_string());
    schedule_entries(&mut m, schedule);
    m
}

fn expect_kind(m: &Manifest, kind: &str) -> Result<()> {
    let found = get(m, "model")?;
    if found != kind {
        return Err(Error::Format(format!("checkpoint holds a `{found}`, expected `{kind}`")));
    }
    Ok(())
}

pub fn save_denoiser(dir: impl AsRef<Path>, model: &TinyDenoiser) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let a = model.arch();
    let mut m = base_manifest(DENOISER_KIND, a.channels, a.width1, a.width2, &model.schedule);
    m.insert("time_embed_dim".into(), a.time_embed_dim.to_string());
    for (name, layer) in denoiser_layers(model) {
        save_dense(dir, name, layer)?;
    }
    write_manifest(dir, &m)
}

pub fn load_denoiser(dir: impl AsRef<Path>) -> Result<TinyDenoiser> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    expect_kind(&m, DENOISER_KIND)?;
    let arch = DenoiserArch {
        channels: get_num(&m, "channels")?,
        width1: get_num(&m, "width1")?,
        width2: get_num(&m, "width2")?,
        time_embed_dim: get_num(&m, "time_embed_dim")?,
    };
    let schedule = read_schedule(&m)?;
    // Shapes come from a freshly built model; values are replaced below.
    let mut model = TinyDenoiser::new(arch, schedule, &mut SeededRng::new(0, 0));
    let shapes: Vec<(&str, usize, usize)> = denoiser_layers(&model)
        .iter()
        .map(|(n, d)| (*n, d.inputs(), d.outputs()))
        .collect();
    let mut loaded = shapes
        .into_iter()
        .map(|(n, i, o)| load_dense(dir, n, i, o))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    model.trunk.window = loaded.next().expect("four layers");
    model.trunk.hidden = loaded.next().expect("four layers");
    model.time = loaded.next().expect("four layers");
    model.out = loaded.next().expect("four layers");
    Ok(model)
}

pub fn save_calibrator(dir: impl AsRef<Path>, model: &NeuralStepCalibrator) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let a = model.arch();
    let mut m = base_manifest(CALIBRATOR_KIND, a.channels, a.width1, a.width2, &model.schedule);
    m.insert("head_width".into(), a.head_width.to_string());
    m.insert("max_step".into(), model.max_step.to_string());
    for (name, layer) in calibrator_layers(model) {
        save_dense(dir, name, layer)?;
    }
    write_manifest(dir, &m)
}

pub fn load_calibrator(dir: impl AsRef<Path>) -> Result<NeuralStepCalibrator> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    expect_kind(&m, CALIBRATOR_KIND)?;
    let arch = CalibratorArch {
        channels: get_num(&m, "channels")?,
        width1: get_num(&m, "width1")?,
        width2: get_num(&m, "width2")?,
        head_width: get_num(&m, "head_width")?,
    };
    let schedule = read_schedule(&m)?;
    let mut model = NeuralStepCalibrator::new(arch, get_num(&m, "max_step")?, schedule, &mut SeededRng::new(0, 0));
    let shapes: Vec<(&str, usize, usize)> = calibrator_layers(&model)
        .iter()
        .map(|(n, d)| (*n, d.inputs(), d.outputs()))
        .collect();
    let mut loaded = shapes
        .into_iter()
        .map(|(n, i, o)| load_dense(dir, n, i, o))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    model.trunk.window = loaded.next().expect("four layers");
    model.trunk.hidden = loaded.next().expect("four layers");
    model.head1 = loaded.next().expect("four layers");
    model.head2 = loaded.next().expect("four layers");
    Ok(model)
}

/// Whether `dir` looks like a checkpoint directory.
pub fn exists(dir: impl AsRef<Path>) -> bool {
    dir.as_ref().join(MANIFEST_FILE).is_file()
}
