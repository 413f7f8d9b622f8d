//! Full-reference metrics (PSNR, SSIM) and a kernel two-sample distance.
//!
//! The distributional metric is an unbiased RBF-kernel MMD on raw pixels. It
//! stands in for feature-based scores such as FID, which need pretrained
//! networks; its values are not comparable to those.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::image::{ImagePatch, SeededRng};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
pub const MMD_MIN_SET: usize = 20;

fn same_shape(a: &ImagePatch, b: &ImagePatch) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(param_err!("shape mismatch: {} vs {}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio on the `[0, 1]` scale, capped at 100 dB.
pub fn psnr(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01,
/// K2 = 0.03, dynamic range 1) over the valid region, averaged over
/// channels.
pub fn ssim(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(param_err!("image {} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window", a.shape()));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa: Vec<f64> = a.channel(c).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.channel(c).iter().map(|&v| v as f64).collect();
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect() };
        let mu_a = filter_valid(&pa, h, w, &g);
        let mu_b = filter_valid(&pb, h, w, &g);
        let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &g);
        let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &g);
        let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &g);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / n as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Pooled Gram matrix of `a ++ b` with the median-distance RBF bandwidth.
struct KernelMatrix {
    k: Vec<f64>,
    n: usize,
}

impl KernelMatrix {
    fn new(a: &[ImagePatch], b: &[ImagePatch]) -> Result<Self> {
        if a.len() < MMD_MIN_SET || b.len() < MMD_MIN_SET {
            return Err(param_err!(
                "MMD needs at least {MMD_MIN_SET} images per set, got {} and {}",
                a.len(),
                b.len()
            ));
        }
        let shape = a[0].shape();
        if let Some(bad) = a.iter().chain(b).find(|x| x.shape() != shape) {
            return Err(param_err!("MMD sets mix shapes {} and {}", shape, bad.shape()));
        }
        let pts: Vec<Vec<f64>> = a.iter().chain(b).map(|x| x.to_f64()).collect();
        let n = pts.len();
        let d2: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                if i == j {
                    0.0
                } else {
                    pts[i].iter().zip(&pts[j]).map(|(x, y)| (x - y).powi(2)).sum()
                }
            })
            .collect();
        let mut off: Vec<f64> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| d2[i * n + j].sqrt())
            .collect();
        let mid = off.len() / 2;
        let median = *off.select_nth_unstable_by(mid, |x, y| x.total_cmp(y)).1;
        let h2 = if median > 0.0 { median * median } else { 1.0 };
        let k = d2.iter().map(|&d| (-d / (2.0 * h2)).exp()).collect();
        Ok(KernelMatrix { k, n })
    }

    /// Unbiased MMD^2 for the split given by `in_a` (`true` = set A).
    fn mmd2(&self, in_a: &[bool]) -> f64 {
        let n = self.n;
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let v = self.k[i * n + j];
                match (in_a[i], in_a[j]) {
                    (true, true) => saa += v,
                    (false, false) => sbb += v,
                    _ => sab += v,
                }
            }
        }
        let m = in_a.iter().filter(|&&v| v).count() as f64;
        let l = n as f64 - m;
        saa / (m * (m - 1.0)) + sbb / (l * (l - 1.0)) - sab / (m * l)
    }
}

/// Unbiased squared MMD between two image sets on flattened pixels, with an
/// RBF kernel whose bandwidth is the median pairwise distance of the pooled
/// sample. Can dip slightly below zero.
pub fn mmd_rbf(a: &[ImagePatch], b: &[ImagePatch]) -> Result<f64> {
    let km = KernelMatrix::new(a, b)?;
    let split: Vec<bool> = (0..km.n).map(|i| i < a.len()).collect();
    Ok(km.mmd2(&split))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub null_mean: f64,
    pub null_std: f64,
    /// `(1 + #{null >= statistic}) / (1 + permutations)`.
    pub p_value: f64,
}

/// Permutation null for [`mmd_rbf`] (bandwidth held fixed).
pub fn mmd_permutation_test(a: &[ImagePatch], b: &[ImagePatch], permutations: usize, rng: &mut SeededRng) -> Result<PermutationTest> {
    if permutations == 0 {
        return Err(param_err!("at least one permutation is required"));
    }
    let km = KernelMatrix::new(a, b)?;
    let mut split: Vec<bool> = (0..km.n).map(|i| i < a.len()).collect();
    let statistic = km.mmd2(&split);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        for i in (1..split.len()).rev() {
            split.swap(i, rng.below(i + 1));
        }
        null.push(km.mmd2(&split));
    }
    let mean = null.iter().sum::<f64>() / permutations as f64;
    let var = null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / permutations as f64;
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    Ok(PermutationTest {
        statistic,
        null_mean: mean,
        null_std: var.sqrt(),
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub method: String,
    pub image_id: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores of one method plus its corpus-level MMD against the
/// clean reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub scores: Vec<ImageScore>,
    pub mmd: Option<f64>,
}

impl MetricReport {
    /// Scores `outputs[i]` against `references[i]`; MMD is computed when
    /// both sets are large enough.
    pub fn evaluate(method: &str, outputs: &[ImagePatch], references: &[ImagePatch]) -> Result<Self> {
        if outputs.len() != references.len() {
            return Err(param_err!("{} outputs for {} references", outputs.len(), references.len()));
        }
        let scores = outputs
            .par_iter()
            .zip(references)
            .enumerate()
            .map(|(i, (o, r))| {
                Ok(ImageScore {
                    method: method.to_string(),
                    image_id: i,
                    psnr: psnr(o, r)?,
                    ssim: ssim(o, r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mmd = if outputs.len() >= MMD_MIN_SET {
            Some(mmd_rbf(outputs, references)?)
        } else {
            None
        };
        Ok(MetricReport {
            method: method.to_string(),
            scores,
            mmd,
        })
    }

    pub fn mean_psnr(&self) -> f64 {
        self.scores.iter().map(|s| s.psnr).sum::<f64>() / self.scores.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.scores.iter().map(|s| s.ssim).sum::<f64>() / self.scores.len() as f64
    }

    /// `method,image_id,psnr,ssim` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for s in &self.scores {
            w.serialize(s).map_err(crate::synth::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
