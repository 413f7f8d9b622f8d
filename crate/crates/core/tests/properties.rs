//! Randomised invariants of the schedule, the forward process and the
//! restoration loop.

use std::sync::atomic::{AtomicU64, Ordering};

use proptest::prelude::*;
use stepcal::calibrator::OracleCalibrator;
use stepcal::denoiser::{Denoiser, ZeroDenoiser};
use stepcal::diffusion::{q_sample, two_region_corrupt};
use stepcal::image::{ImagePatch, RegionMask, SeededRng, Shape};
use stepcal::metrics::psnr;
use stepcal::restore::{rscd_restore, RestoreConfig};
use stepcal::schedule::{NoiseSchedule, ScheduleKind};
use stepcal::synth::gen_two_class_corpus;

/// Zero noise prediction, counting every call.
#[derive(Default)]
struct CountingDenoiser(AtomicU64);

impl Denoiser for CountingDenoiser {
    fn predict(&self, x_t: &ImagePatch, t: usize) -> stepcal::Result<ImagePatch> {
        self.0.fetch_add(1, Ordering::Relaxed);
        ZeroDenoiser.predict(x_t, t)
    }
}

fn random_image(shape: Shape, seed: u64) -> ImagePatch {
    let mut rng = SeededRng::new(seed, 0);
    ImagePatch::from_fn(shape, |_, _, _| rng.uniform() as f32)
}

fn small(seed: u64) -> ImagePatch {
    random_image(Shape::new(1, 4, 4), seed)
}

fn cosine() -> NoiseSchedule {
    NoiseSchedule::cosine(1000).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nfe_accounting_is_exact(t0 in 0usize..=200, d in 1usize..=40, seed: u64) {
        let s = cosine();
        let den = CountingDenoiser::default();
        let cal = OracleCalibrator::new(t0, 200);
        let cfg = RestoreConfig { interval: d, ..Default::default() };
        let (_, trace) = rscd_restore(&small(seed), &cal, &den, &s, &cfg, &mut SeededRng::new(seed, 1)).unwrap();
        prop_assert_eq!(den.0.load(Ordering::Relaxed), trace.nfe);
        prop_assert_eq!(trace.nfe, t0 as u64);
        prop_assert_eq!(trace.events.len(), t0.div_ceil(d).max(1));
        prop_assert!(!trace.budget_hit);
        for (k, e) in trace.events.iter().enumerate() {
            prop_assert_eq!(e.at_nfe, (k * d) as u64);
            prop_assert_eq!(e.remaining, t0 - k * d);
        }
    }

    #[test]
    fn unclamped_loop_stops_within_budget(c in 0usize..=200, d in 1usize..=40, budget in 200u64..=600, seed: u64) {
        let s = cosine();
        let cal = OracleCalibrator::new(c, 200);
        let cfg = RestoreConfig { interval: d, nfe_budget: budget, clamp_recalibration: false, ..Default::default() };
        let (_, trace) = rscd_restore(&small(seed), &cal, &ZeroDenoiser, &s, &cfg, &mut SeededRng::new(seed, 1)).unwrap();
        prop_assert!(trace.nfe <= budget);
        // A constant prediction of at least d re-arms the loop forever; only
        // the budget stops it, and only once the next chunk no longer fits.
        let loops = c > 0 && c >= d;
        prop_assert_eq!(trace.budget_hit, loops);
        if loops {
            prop_assert!(trace.nfe + d as u64 > budget);
        } else {
            prop_assert_eq!(trace.nfe, c as u64);
        }
    }

    #[test]
    fn degenerate_masks_reduce_to_single_corruption(t in 0usize..=200, frac in 0.0f64..=1.0, seed: u64) {
        let s = cosine();
        let t2 = (t as f64 * frac).floor() as usize;
        let x0 = random_image(Shape::new(2, 6, 5), seed);
        let run = |value| {
            let mut rng = SeededRng::new(seed, 1);
            two_region_corrupt(&x0, t, t2, &RegionMask::filled(6, 5, value), &s, &mut rng).unwrap()
        };
        let mut rng = SeededRng::new(seed, 1);
        let hi = q_sample(&x0, t, &s, &mut rng).unwrap().0;
        let lo = q_sample(&x0, t2, &s, &mut rng).unwrap().0;
        prop_assert_eq!(run(true), hi);
        prop_assert_eq!(run(false), lo);
    }

    #[test]
    fn schedule_invariants(steps in 2usize..=2000, linear: bool) {
        let s = NoiseSchedule::new(if linear { ScheduleKind::linear() } else { ScheduleKind::cosine() }, steps).unwrap();
        prop_assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        prop_assert!(s.alpha_bar(steps + 1).is_err());
        for t in 1..=steps {
            let (b, a, ab) = (s.beta(t).unwrap(), s.alpha(t).unwrap(), s.alpha_bar(t).unwrap());
            prop_assert!(b > 0.0 && b < 1.0);
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            prop_assert!(ab > 0.0 && ab < s.alpha_bar(t - 1).unwrap());
            prop_assert!((ab - s.alpha_bar(t - 1).unwrap() * a).abs() < 1e-12);
            prop_assert!(s.cumulative_noise(t).unwrap() > s.cumulative_noise(t - 1).unwrap());
            prop_assert_eq!(s.nearest_step(s.cumulative_noise(t).unwrap()), t);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Running single-step transitions from `s` to `t` on top of
    /// `q(x_s | x0)` matches `q(x_t | x0)` in its first two moments.
    #[test]
    fn forward_process_composes(x0 in 0.0f32..1.0, t in prop_oneof![Just(5usize), Just(50)], seed: u64) {
        let s = cosine();
        let from = t / 2;
        let shape = Shape::new(1, 32, 32);
        let x0 = ImagePatch::from_fn(shape, |_, _, _| x0);
        let n = 40;
        let mut direct = Vec::new();
        let mut composed = Vec::new();
        for i in 0..n {
            let mut rng = SeededRng::new(seed, i);
            direct.extend_from_slice(q_sample(&x0, t, &s, &mut rng).unwrap().0.data());
            let mut x = q_sample(&x0, from, &s, &mut rng).unwrap().0;
            for k in from + 1..=t {
                let (a, b) = (s.alpha(k).unwrap().sqrt(), s.beta(k).unwrap().sqrt());
                let z = ImagePatch::standard_normal(shape, &mut rng);
                x = x.zip_map(&z, |v, e| (a * v as f64 + b * e as f64) as f32);
            }
            composed.extend_from_slice(x.data());
        }
        let moments = |v: &[f32]| {
            let m = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var)
        };
        let ((m1, v1), (m2, v2)) = (moments(&direct), moments(&composed));
        let ab = s.alpha_bar(t).unwrap();
        let var = 1.0 - ab;
        // 40 960 draws each: standard errors of ~0.005 sigma on the mean and
        // ~0.7% on the variance.
        let se = (var / direct.len() as f64).sqrt();
        prop_assert!((m1 - m2).abs() < 6.0 * se * 2f64.sqrt(), "means {m1} vs {m2}");
        prop_assert!((m1 - ab.sqrt() * x0.data()[0] as f64).abs() < 6.0 * se);
        prop_assert!((v1 / v2 - 1.0).abs() < 0.05, "variances {v1} vs {v2}");
        prop_assert!((v1 / var - 1.0).abs() < 0.05);
    }

    #[test]
    fn corpus_psnr_falls_with_corruption(seed in 0u64..1000) {
        let s = cosine();
        let clean = gen_two_class_corpus(Shape::default(), 5, seed).unwrap().images;
        let mean_psnr = |t| {
            clean
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let y = q_sample(x, t, &s, &mut SeededRng::new(seed, i as u64)).unwrap().0;
                    psnr(&y, x).unwrap()
                })
                .sum::<f64>()
                / clean.len() as f64
        };
        let curve: Vec<f64> = [0, 25, 50, 100].into_iter().map(mean_psnr).collect();
        prop_assert!(curve.windows(2).all(|w| w[1] < w[0]), "{curve:?}");
    }
}
