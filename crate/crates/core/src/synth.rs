//! Synthetic clean corpora, degradations with exact step labels, and
//! depth-ordered z-stacks.
//!
//! Degradations are expressed in schedule steps, not raw noise levels, so
//! every degraded image carries its exact ground-truth `t`. Real microscope
//! degradations (scattering, autofluorescence, ...) are not modelled.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::GaussianMixture;
use crate::diffusion::{q_sample, two_region_corrupt};
use crate::error::{param_err, Error, Result};
use crate::image::{load_tensor, save_tensor, ImagePatch, MaskKind, RegionMask, SeededRng, Shape, Volume};
use crate::schedule::NoiseSchedule;

/// Class label used by the two-class downstream task.
pub const LABEL_BLOBS: u8 = 0;
pub const LABEL_TEXTURE: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Every pixel drawn i.i.d. from `prior`.
    GaussMixtureField { prior: GaussianMixture },
    /// Oriented sinusoidal grating around 0.5 (high pixel variance).
    Texture,
    /// A few soft Gaussian bumps on a flat 0.5 background (low variance).
    Blobs,
}

impl Generator {
    fn tag(&self) -> u64 {
        match self {
            Generator::GaussMixtureField { .. } => 0x6d1,
            Generator::Texture => 0x7e7,
            Generator::Blobs => 0xb10,
        }
    }

    fn draw(&self, shape: Shape, rng: &mut SeededRng) -> ImagePatch {
        match self {
            Generator::GaussMixtureField { prior } => ImagePatch::from_fn(shape, |_, _, _| prior.sample(rng) as f32),
            Generator::Texture => {
                let amp = 0.25 + 0.1 * rng.uniform();
                let period = 10.0 + 6.0 * rng.uniform();
                let theta = rng.uniform() * PI;
                let phase = rng.uniform() * TAU;
                let (kx, ky) = (TAU * theta.cos() / period, TAU * theta.sin() / period);
                ImagePatch::from_fn(shape, |_, y, x| {
                    (0.5 + amp * (kx * x as f64 + ky * y as f64 + phase).sin()) as f32
                })
            }
            Generator::Blobs => {
                let n = rng.range_inclusive(2, 4);
                let bumps: Vec<(f64, f64, f64, f64)> = (0..n)
                    .map(|_| {
                        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                        let amp = sign * (0.1 + 0.1 * rng.uniform());
                        let sigma = 2.0 + 2.0 * rng.uniform();
                        let cy = rng.uniform() * shape.height as f64;
                        let cx = rng.uniform() * shape.width as f64;
                        (amp, sigma, cy, cx)
                    })
                    .collect();
                ImagePatch::from_fn(shape, |_, y, x| {
                    let v: f64 = bumps
                        .iter()
                        .map(|&(a, s, cy, cx)| {
                            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            a * (-r2 / (2.0 * s * s)).exp()
                        })
                        .sum();
                    (0.5 + v) as f32
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub generator: Generator,
    pub shape: Shape,
    pub count: usize,
    pub label: u8,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(generator: Generator, shape: Shape, count: usize, label: u8, seed: u64) -> Self {
        CorpusSpec {
            generator,
            shape,
            count,
            label,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(param_err!("corpus count must be at least 1"));
        }
        if self.shape.is_empty() {
            return Err(param_err!("corpus shape {} is empty", self.shape));
        }
        Ok(())
    }
}

/// Clean images with class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub images: Vec<ImagePatch>,
    pub labels: Vec<u8>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Concatenates corpora in order.
    pub fn concat(parts: impl IntoIterator<Item = Corpus>) -> Corpus {
        let mut out = Corpus::default();
        for p in parts {
            out.images.extend(p.images);
            out.labels.extend(p.labels);
        }
        out
    }
}

/// Deterministic corpus: item `i` is drawn from stream `i` of `spec.seed`.
pub fn gen_clean_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let tag = spec.generator.tag();
    let images: Vec<ImagePatch> = (0..spec.count)
        .into_par_iter()
        .map(|i| spec.generator.draw(spec.shape, &mut SeededRng::new(spec.seed, i as u64).derive(tag)))
        .collect();
    Ok(Corpus {
        labels: vec![spec.label; images.len()],
        images,
    })
}

/// Equal numbers of blob and texture images, interleaved (blob first).
pub fn gen_two_class_corpus(shape: Shape, per_class: usize, seed: u64) -> Result<Corpus> {
    let blobs = gen_clean_corpus(&CorpusSpec::new(Generator::Blobs, shape, per_class, LABEL_BLOBS, seed))?;
    let texture = gen_clean_corpus(&CorpusSpec::new(Generator::Texture, shape, per_class, LABEL_TEXTURE, seed))?;
    let mut out = Corpus::default();
    for (b, t) in blobs.images.into_iter().zip(texture.images) {
        out.images.push(b);
        out.labels.push(LABEL_BLOBS);
        out.images.push(t);
        out.labels.push(LABEL_TEXTURE);
    }
    Ok(out)
}

/// Distribution of corruption steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum TRange {
    Fixed { t: usize },
    /// Uniform on `lo..=hi`.
    Uniform { lo: usize, hi: usize },
    /// `P(t = k) ∝ p (1 - p)^k` on `0..=max` (truncated and renormalised, so
    /// no mass piles up on `max`). With `stratified`, item `i` of `n` takes the `(i + 0.5) / n`
    /// quantile instead of a random draw, which removes sampling noise from
    /// histogram shape checks.
    Geometric { p: f64, max: usize, stratified: bool },
}

impl TRange {
    pub fn max(&self) -> usize {
        match *self {
            TRange::Fixed { t } => t,
            TRange::Uniform { hi, .. } => hi,
            TRange::Geometric { max, .. } => max,
        }
    }

    pub fn validate(&self, max_step: usize) -> Result<()> {
        match *self {
            TRange::Uniform { lo, hi } if lo > hi => return Err(param_err!("empty step range {lo}..={hi}")),
            TRange::Geometric { p, .. } if !(p > 0.0 && p < 1.0) => {
                return Err(param_err!("geometric parameter must lie in (0, 1), got {p}"))
            }
            _ => {}
        }
        if self.max() > max_step {
            return Err(param_err!("step {} exceeds the bound {max_step}", self.max()));
        }
        Ok(())
    }

    pub fn draw(&self, index: usize, count: usize, rng: &mut SeededRng) -> usize {
        match *self {
            TRange::Fixed { t } => t,
            TRange::Uniform { lo, hi } => rng.range_inclusive(lo, hi),
            TRange::Geometric { p, max, stratified } => {
                let u = if stratified {
                    (index as f64 + 0.5) / count as f64
                } else {
                    rng.uniform()
                };
                // smallest k with CDF(k) = 1 - (1-p)^(k+1) >= u F(max)
                let u = u * (1.0 - (1.0 - p).powi(max as i32 + 1));
                let k = ((1.0 - u).ln() / (1.0 - p).ln() - 1.0).ceil().max(0.0);
                (k as usize).min(max)
            }
        }
    }
}

/// Linear depth profile `t(z) = round(t_max * z / (slices - 1))`, or an
/// explicit non-decreasing list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum DepthProfile {
    Linear { t_max: usize, slices: usize },
    Explicit { steps: Vec<usize> },
}

pub const DEFAULT_DEPTH_T_MAX: usize = 120;

impl Default for DepthProfile {
    fn default() -> Self {
        DepthProfile::Linear {
            t_max: DEFAULT_DEPTH_T_MAX,
            slices: crate::image::DEFAULT_SLICES,
        }
    }
}

impl DepthProfile {
    pub fn steps(&self) -> Result<Vec<usize>> {
        match self {
            DepthProfile::Linear { t_max, slices } => {
                if *slices < 2 {
                    return Err(param_err!("a depth profile needs at least 2 slices"));
                }
                Ok((0..*slices)
                    .map(|z| (*t_max as f64 * z as f64 / (*slices - 1) as f64).round() as usize)
                    .collect())
            }
            DepthProfile::Explicit { steps } => {
                if steps.is_empty() {
                    return Err(param_err!("depth profile is empty"));
                }
                if let Some(w) = steps.windows(2).find(|w| w[1] < w[0]) {
                    return Err(param_err!("depth profile must be non-decreasing ({} then {})", w[0], w[1]));
                }
                Ok(steps.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradeSpec {
    /// Whole-image corruption at one step.
    UniformT { t: TRange },
    /// Masked region at `t`, the rest at `t'` uniform on `0..=t`.
    TwoRegion { t: TRange, mask: MaskKind },
    /// Item `i` is treated as slice `i mod len` of the profile.
    DepthProfile { profile: DepthProfile },
}

impl DegradeSpec {
    pub fn validate(&self, max_step: usize) -> Result<()> {
        match self {
            DegradeSpec::UniformT { t } | DegradeSpec::TwoRegion { t, .. } => t.validate(max_step),
            DegradeSpec::DepthProfile { profile } => {
                let steps = profile.steps()?;
                match steps.last() {
                    Some(&m) if m > max_step => Err(param_err!("depth profile step {m} exceeds {max_step}")),
                    _ => Ok(()),
                }
            }
        }
    }
}

/// Corrupts every image; item `i` uses `rng.derive(i)`. Returns each
/// degraded image with its ground-truth (largest) step.
pub fn degrade_corpus(
    corpus: &[ImagePatch],
    spec: &DegradeSpec,
    schedule: &NoiseSchedule,
    rng: &SeededRng,
) -> Result<Vec<(ImagePatch, usize)>> {
    spec.validate(schedule.steps())?;
    let profile = match spec {
        DegradeSpec::DepthProfile { profile } => profile.steps()?,
        _ => Vec::new(),
    };
    let n = corpus.len();
    corpus
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut r = rng.derive(i as u64);
            match spec {
                DegradeSpec::UniformT { t } => {
                    let t = t.draw(i, n, &mut r);
                    Ok((q_sample(x0, t, schedule, &mut r)?.0, t))
                }
                DegradeSpec::TwoRegion { t, mask } => {
                    let t = t.draw(i, n, &mut r);
                    let t_prime = r.range_inclusive(0, t);
                    let mask = RegionMask::random(*mask, x0.height(), x0.width(), &mut r)?;
                    Ok((two_region_corrupt(x0, t, t_prime, &mask, schedule, &mut r)?, t))
                }
                DegradeSpec::DepthProfile { .. } => {
                    let t = profile[i % profile.len()];
                    Ok((q_sample(x0, t, schedule, &mut r)?.0, t))
                }
            }
        })
        .collect()
}

/// Corrupts slice `z` of `clean` at step `t(z)`; slice `z` uses
/// `rng.derive(z)`.
pub fn gen_zstack(clean: &Volume, profile: &DepthProfile, schedule: &NoiseSchedule, rng: &SeededRng) -> Result<Volume> {
    let steps = profile.steps()?;
    if steps.len() != clean.len() {
        return Err(param_err!("profile has {} slices but the volume has {}", steps.len(), clean.len()));
    }
    let slices = clean
        .slices()
        .par_iter()
        .zip(steps.par_iter())
        .enumerate()
        .map(|(z, (x, &t))| Ok(q_sample(x, t, schedule, &mut rng.derive(z as u64))?.0))
        .collect::<Result<Vec<_>>>()?;
    Volume::new(slices, clean.depth_start_um(), clean.depth_step_um())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub path: String,
    pub label: Option<u8>,
    pub t: Option<usize>,
}

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Writes `dir/NNNNN.pft` per image plus `dir/manifest.csv`.
pub fn save_corpus(dir: impl AsRef<Path>, images: &[ImagePatch], labels: Option<&[u8]>, steps: Option<&[usize]>) -> Result<()> {
    let dir = dir.as_ref();
    for (name, len) in [("labels", labels.map(|l| l.len())), ("steps", steps.map(|s| s.len()))] {
        if let Some(len) = len {
            if len != images.len() {
                return Err(param_err!("{len} {name} for {} images", images.len()));
            }
        }
    }
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST_NAME)).map_err(csv_err)?;
    for (i, img) in images.iter().enumerate() {
        let name = format!("{i:05}.pft");
        save_tensor(dir.join(&name), img)?;
        w.serialize(ManifestRow {
            id: i,
            path: name,
            label: labels.map(|l| l[i]),
            t: steps.map(|s| s[i]),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a directory written by [`save_corpus`].
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<(Vec<ManifestRow>, Vec<ImagePatch>)> {
    let dir = dir.as_ref();
    let mut r = csv::Reader::from_path(dir.join(MANIFEST_NAME)).map_err(csv_err)?;
    let rows: Vec<ManifestRow> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
    let images = rows
        .iter()
        .map(|row| load_tensor(resolve(dir, &row.path)))
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, images))
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("CSV: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> Shape {
        Shape::new(1, 32, 32)
    }

    #[test]
    fn corpora_are_deterministic() {
        let spec = CorpusSpec::new(Generator::Texture, shape(), 5, LABEL_TEXTURE, 9);
        assert_eq!(gen_clean_corpus(&spec).unwrap(), gen_clean_corpus(&spec).unwrap());
        let other = CorpusSpec { seed: 10, ..spec.clone() };
        assert_ne!(gen_clean_corpus(&spec).unwrap(), gen_clean_corpus(&other).unwrap());
        assert!(gen_clean_corpus(&CorpusSpec { count: 0, ..spec }).is_err());
    }

    #[test]
    fn mixture_field_matches_prior_moments() {
        let prior = GaussianMixture::single(0.5, 0.01).unwrap();
        let spec = CorpusSpec::new(Generator::GaussMixtureField { prior }, shape(), 20, 0, 3);
        let c = gen_clean_corpus(&spec).unwrap();
        let px: Vec<f64> = c.images.iter().flat_map(|i| i.to_f64()).collect();
        let n = px.len() as f64;
        let mean = px.iter().sum::<f64>() / n;
        let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.5).abs() / 0.5 < 0.02, "mean {mean}");
        assert!((var - 0.01).abs() / 0.01 < 0.02 * 2.5, "var {var}");
    }

    #[test]
    fn classes_separate_by_variance() {
        let c = gen_two_class_corpus(shape(), 200, 1).unwrap();
        let correct = c
            .images
            .iter()
            .zip(&c.labels)
            .filter(|(img, &l)| (img.variance() > 0.015) == (l == LABEL_TEXTURE))
            .count();
        let acc = correct as f64 / c.len() as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn uniform_range_histogram_is_flat() {
        let range = TRange::Uniform { lo: 1, hi: 200 };
        let mut rng = SeededRng::new(4, 0);
        let n = 10_000;
        let mut counts = [0usize; 200];
        for i in 0..n {
            counts[range.draw(i, n, &mut rng) - 1] += 1;
        }
        let e = n as f64 / 200.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // chi-square 99th percentile with 199 degrees of freedom
        assert!(chi2 < 249.4, "chi2 {chi2}");
    }

    #[test]
    fn stratified_geometric_decays() {
        let range = TRange::Geometric {
            p: 0.03,
            max: 200,
            stratified: true,
        };
        let mut rng = SeededRng::new(0, 0);
        let ts: Vec<usize> = (0..1000).map(|i| range.draw(i, 1000, &mut rng)).collect();
        assert!(ts.iter().all(|&t| t <= 200));
        let bins: Vec<usize> = (0..=20).map(|b| ts.iter().filter(|&&t| t / 10 == b).count()).collect();
        assert!(bins.windows(2).all(|w| w[1] <= w[0]), "{bins:?}");
        assert!(range.validate(100).is_err());
    }

    #[test]
    fn zero_step_degradation_is_identity() {
        let c = gen_two_class_corpus(shape(), 3, 2).unwrap();
        let s = NoiseSchedule::cosine(1000).unwrap();
        let out = degrade_corpus(&c.images, &DegradeSpec::UniformT { t: TRange::Fixed { t: 0 } }, &s, &SeededRng::new(1, 0))
            .unwrap();
        for ((lq, t), x) in out.iter().zip(&c.images) {
            assert_eq!(lq, x);
            assert_eq!(*t, 0);
        }
    }

    #[test]
    fn two_region_label_is_the_larger_step() {
        let c = gen_two_class_corpus(shape(), 10, 2).unwrap();
        let s = NoiseSchedule::cosine(1000).unwrap();
        let spec = DegradeSpec::TwoRegion {
            t: TRange::Fixed { t: 80 },
            mask: MaskKind::HalfPlane,
        };
        let out = degrade_corpus(&c.images, &spec, &s, &SeededRng::new(1, 0)).unwrap();
        assert!(out.iter().all(|(_, t)| *t == 80));
        let again = degrade_corpus(&c.images, &spec, &s, &SeededRng::new(1, 0)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn zstack_profile_and_noise_growth() {
        let steps = DepthProfile::default().steps().unwrap();
        assert_eq!(steps.len(), 20);
        assert_eq!(steps[0], 0);
        assert_eq!(steps[19], 120);
        assert!(DepthProfile::Explicit { steps: vec![0, 5, 3] }.steps().is_err());

        let s = NoiseSchedule::cosine(1000).unwrap();
        let clean = ImagePatch::filled(Shape::new(1, 64, 64), 0.5);
        let vol = gen_zstack(
            &Volume::replicate(&clean, 20).unwrap(),
            &DepthProfile::default(),
            &s,
            &SeededRng::new(3, 0),
        )
        .unwrap();
        assert_eq!(vol.slices()[0], clean);
        let vars: Vec<f64> = vol.slices().iter().map(|x| x.variance()).collect();
        // expected noise variance 1 - abar(t) grows with z; allow Monte-Carlo slack
        for w in vars.windows(2) {
            assert!(w[1] >= w[0] * 0.9, "{vars:?}");
        }
        assert!(vars[19] > vars[10] && vars[10] > vars[1]);
    }

    #[test]
    fn corpus_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_two_class_corpus(shape(), 2, 5).unwrap();
        let steps = vec![0, 5, 10, 15];
        save_corpus(dir.path(), &c.images, Some(&c.labels), Some(&steps)).unwrap();
        let (rows, images) = load_corpus(dir.path()).unwrap();
        assert_eq!(images, c.images);
        assert_eq!(rows.iter().map(|r| r.t.unwrap()).collect::<Vec<_>>(), steps);
        assert_eq!(rows.iter().map(|r| r.label.unwrap()).collect::<Vec<_>>(), c.labels);
        assert!(save_corpus(dir.path(), &c.images, Some(&c.labels[..1]), None).is_err());
    }
}
