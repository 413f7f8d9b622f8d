//! Forward corruption and the reverse DDPM transition.

use crate::denoiser::Denoiser;
use crate::error::{param_err, Error, Result};
use crate::image::{ImagePatch, RegionMask, SeededRng, Shape};
use crate::schedule::NoiseSchedule;

/// Counts denoiser evaluations (NFE).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NfeCounter(u64);

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0
    }

    pub fn incr(&mut self) {
        self.0 += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReverseStepConfig {
    /// Add `sqrt(beta_1) z` on the last step as well. On by default: the
    /// sampling loop adds noise at every step including `t = 1`.
    pub noise_at_final_step: bool,
}

impl Default for ReverseStepConfig {
    fn default() -> Self {
        ReverseStepConfig {
            noise_at_final_step: true,
        }
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` with the given noise.
pub fn q_sample_with_noise(
    x0: &ImagePatch,
    t: usize,
    eps: &ImagePatch,
    schedule: &NoiseSchedule,
) -> Result<ImagePatch> {
    if eps.shape() != x0.shape() {
        return Err(param_err!("noise shape {} != image shape {}", eps.shape(), x0.shape()));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| (a * x as f64 + s * e as f64) as f32))
}

/// Samples `x_t ~ q(x_t | x0)`; returns `(x_t, eps)`.
pub fn q_sample(
    x0: &ImagePatch,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<(ImagePatch, ImagePatch)> {
    schedule.alpha_bar(t)?;
    let eps = ImagePatch::standard_normal(x0.shape(), rng);
    let xt = q_sample_with_noise(x0, t, &eps, schedule)?;
    Ok((xt, eps))
}

/// Composites `mask * x_t + (1 - mask) * x_t'` from two independent
/// corruptions of `x0`, with `t_prime <= t`.
pub fn two_region_corrupt(
    x0: &ImagePatch,
    t: usize,
    t_prime: usize,
    mask: &RegionMask,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<ImagePatch> {
    if t_prime > t {
        return Err(param_err!("t' = {t_prime} must not exceed t = {t}"));
    }
    if mask.height() != x0.height() || mask.width() != x0.width() {
        return Err(param_err!(
            "mask {}x{} does not match image {}",
            mask.height(),
            mask.width(),
            x0.shape()
        ));
    }
    let (hi, _) = q_sample(x0, t, schedule, rng)?;
    let (lo, _) = q_sample(x0, t_prime, schedule, rng)?;
    let shape = x0.shape();
    Ok(ImagePatch::from_fn(shape, |c, y, x| {
        if mask.get(y, x) {
            hi.get(c, y, x)
        } else {
            lo.get(c, y, x)
        }
    }))
}

/// The reverse transition with explicit `eps_hat` and `z`:
/// `x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sqrt(beta_t) z`.
pub fn reverse_transition(
    x_t: &ImagePatch,
    t: usize,
    eps_hat: &ImagePatch,
    z: Option<&ImagePatch>,
    schedule: &NoiseSchedule,
) -> Result<ImagePatch> {
    let alpha = schedule.alpha(t)?;
    let beta = schedule.beta(t)?;
    let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar(t)?).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out = x_t.zip_map(eps_hat, |x, e| (inv * (x as f64 - coef * e as f64)) as f32);
    if let Some(z) = z {
        let s = beta.sqrt();
        out = out.zip_map(z, |x, z| (x as f64 + s * z as f64) as f32);
    }
    Ok(out)
}

/// One DDPM step `x_t -> x_{t-1}`; counts one NFE.
pub fn ddpm_step(
    x_t: &ImagePatch,
    t: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: ReverseStepConfig,
    rng: &mut SeededRng,
    nfe: &mut NfeCounter,
) -> Result<ImagePatch> {
    if t == 0 || t > schedule.steps() {
        return Err(param_err!("reverse step needs 1 <= t <= {}, got {t}", schedule.steps()));
    }
    let eps_hat = denoiser.predict(x_t, t)?;
    nfe.incr();
    if eps_hat.shape() != x_t.shape() {
        return Err(Error::Contract(format!(
            "denoiser returned {} for input {}",
            eps_hat.shape(),
            x_t.shape()
        )));
    }
    let z = if t > 1 || cfg.noise_at_final_step {
        Some(ImagePatch::standard_normal(x_t.shape(), rng))
    } else {
        None
    };
    reverse_transition(x_t, t, &eps_hat, z.as_ref(), schedule)
}

/// Runs the reverse chain from step `from` down to step `to`.
pub fn reverse_chain(
    x: &ImagePatch,
    from: usize,
    to: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: ReverseStepConfig,
    rng: &mut SeededRng,
    nfe: &mut NfeCounter,
) -> Result<ImagePatch> {
    let mut cur = x.clone();
    for k in (to + 1..=from).rev() {
        cur = ddpm_step(&cur, k, denoiser, schedule, cfg, rng, nfe)?;
    }
    Ok(cur)
}

/// Full ancestral sampling from `x_T ~ N(0, I)`.
pub fn generate(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    shape: Shape,
    cfg: ReverseStepConfig,
    rng: &mut SeededRng,
    nfe: &mut NfeCounter,
) -> Result<ImagePatch> {
    let x_t = ImagePatch::standard_normal(shape, rng);
    reverse_chain(&x_t, schedule.steps(), 0, denoiser, schedule, cfg, rng, nfe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticGmDenoiser, GaussianMixture, ZeroDenoiser};

    fn shape() -> Shape {
        Shape::new(1, 8, 8)
    }

    #[test]
    fn q_sample_at_zero_is_identity() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = ImagePatch::from_fn(shape(), |_, y, x| (y * 8 + x) as f32 / 64.0);
        let (xt, eps) = q_sample(&x0, 0, &s, &mut SeededRng::new(1, 0)).unwrap();
        assert_eq!(xt, x0);
        assert_eq!(eps.shape(), x0.shape());
        assert!(q_sample(&x0, 1001, &s, &mut SeededRng::new(1, 0)).is_err());
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = ImagePatch::filled(shape(), 0.8);
        let xt = q_sample_with_noise(&x0, 100, &ImagePatch::zeros(shape()), &s).unwrap();
        let a = s.alpha_bar(100).unwrap().sqrt();
        for &v in xt.data() {
            assert!((v as f64 - 0.8 * a).abs() < 1e-6);
        }
    }

    #[test]
    fn two_region_rejects_inverted_steps() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = ImagePatch::zeros(shape());
        let mask = RegionMask::filled(8, 8, true);
        assert!(two_region_corrupt(&x0, 10, 11, &mask, &s, &mut SeededRng::new(0, 0)).is_err());
        let wrong = RegionMask::filled(4, 8, true);
        assert!(two_region_corrupt(&x0, 10, 5, &wrong, &s, &mut SeededRng::new(0, 0)).is_err());
    }

    #[test]
    fn full_mask_equals_q_sample_draw() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = ImagePatch::filled(shape(), 0.3);
        let all = RegionMask::filled(8, 8, true);
        let none = RegionMask::filled(8, 8, false);
        let a = two_region_corrupt(&x0, 40, 10, &all, &s, &mut SeededRng::new(5, 0)).unwrap();
        let (b, _) = q_sample(&x0, 40, &s, &mut SeededRng::new(5, 0)).unwrap();
        assert_eq!(a, b);
        let c = two_region_corrupt(&x0, 40, 10, &none, &s, &mut SeededRng::new(5, 0)).unwrap();
        let mut r = SeededRng::new(5, 0);
        let _ = q_sample(&x0, 40, &s, &mut r).unwrap();
        let (d, _) = q_sample(&x0, 10, &s, &mut r).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn exact_noise_cancels_at_first_step() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let mut rng = SeededRng::new(3, 0);
        let x0 = ImagePatch::from_fn(shape(), |_, y, x| ((y + x) % 5) as f32 / 4.0);
        let (x1, eps) = q_sample(&x0, 1, &s, &mut rng).unwrap();
        let back = reverse_transition(&x1, 1, &eps, None, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_eps_divides_by_sqrt_alpha() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x = ImagePatch::filled(shape(), 0.5);
        let mut nfe = NfeCounter::new();
        let cfg = ReverseStepConfig {
            noise_at_final_step: false,
        };
        let out = ddpm_step(&x, 1, &ZeroDenoiser, &s, cfg, &mut SeededRng::new(0, 0), &mut nfe).unwrap();
        let expected = 0.5 / s.alpha(1).unwrap().sqrt();
        assert!(out.data().iter().all(|&v| (v as f64 - expected).abs() < 1e-6));
        assert_eq!(nfe.get(), 1);
        assert!(ddpm_step(&x, 0, &ZeroDenoiser, &s, cfg, &mut SeededRng::new(0, 0), &mut nfe).is_err());
    }

    struct WrongShape;
    impl Denoiser for WrongShape {
        fn predict(&self, _x: &ImagePatch, _t: usize) -> Result<ImagePatch> {
            Ok(ImagePatch::zeros(Shape::new(1, 2, 2)))
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let x = ImagePatch::zeros(shape());
        let err = ddpm_step(
            &x,
            3,
            &WrongShape,
            &s,
            ReverseStepConfig::default(),
            &mut SeededRng::new(0, 0),
            &mut NfeCounter::new(),
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn generate_counts_and_repeats() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let prior = GaussianMixture::single(0.5, 0.01).unwrap();
        let d = AnalyticGmDenoiser::new(prior, s.clone());
        let run = |seed| {
            let mut nfe = NfeCounter::new();
            let img = generate(&d, &s, shape(), ReverseStepConfig::default(), &mut SeededRng::new(seed, 0), &mut nfe).unwrap();
            (img, nfe.get())
        };
        let (a, n) = run(9);
        let (b, _) = run(9);
        assert_eq!(a, b);
        assert_eq!(n, 50);
    }

    #[test]
    fn step_stays_finite_at_max_beta() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x = ImagePatch::filled(shape(), 3.0);
        let out = ddpm_step(
            &x,
            1000,
            &ZeroDenoiser,
            &s,
            ReverseStepConfig::default(),
            &mut SeededRng::new(0, 0),
            &mut NfeCounter::new(),
        )
        .unwrap();
        assert!(out.is_finite());
    }
}
