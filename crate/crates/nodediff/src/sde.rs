//! Variance-preserving SDE: `dZ = -(beta(t)/2) Z dt + sqrt(beta(t)) dW` with a
//! linear rate schedule. Provides the closed-form Gaussian transition kernel,
//! time sampling (uniform and variance-reducing importance sampling), and the
//! additive constant of the cross-entropy bound.
//!
//! All kernel math is in `f64`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpsdeConfig {
    /// Variance rate at t = 0.
    pub beta0: f64,
    /// Variance rate at t = 1.
    pub beta1: f64,
    /// Lower time cutoff for the score-matching objective.
    pub eps_t: f64,
    /// Initial kernel standard deviation (0 for exact data at t = 0).
    pub sigma0: f64,
}

impl Default for VpsdeConfig {
    fn default() -> Self {
        Self {
            beta0: 0.1,
            beta1: 20.0,
            eps_t: 0.01,
            sigma0: 0.0,
        }
    }
}

impl VpsdeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.beta0 > 0.0 && self.beta0 <= self.beta1) {
            errs.push(format!("sde.beta0/beta1: need 0 < beta0 <= beta1, got ({}, {})", self.beta0, self.beta1));
        }
        if !(0.0..1.0).contains(&self.eps_t) {
            errs.push(format!("sde.eps_t: need 0 <= eps_t < 1, got {}", self.eps_t));
        }
        if !(0.0..1.0).contains(&self.sigma0) {
            errs.push(format!("sde.sigma0: need 0 <= sigma0 < 1, got {}", self.sigma0));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::range(format!("t = {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// `beta(t) = beta0 + (beta1 - beta0) t`.
    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta0 + (self.beta1 - self.beta0) * t)
    }

    /// Drift coefficient `f(t) = -beta(t) / 2`.
    pub fn drift_coeff(&self, t: f64) -> Result<f64> {
        Ok(-self.beta(t)? / 2.0)
    }

    /// Diffusion coefficient `g(t) = sqrt(beta(t))`.
    pub fn diffusion_coeff(&self, t: f64) -> Result<f64> {
        Ok(self.beta(t)?.sqrt())
    }

    /// `int_0^t beta(s) ds = beta0 t + (beta1 - beta0) t^2 / 2`.
    pub fn integral_beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta0 * t + (self.beta1 - self.beta0) * t * t / 2.0)
    }

    /// Gaussian transition kernel parameters of `q(Z^t | Z^0)`:
    /// mean scale `exp(-int beta / 2)` and standard deviation
    /// `sqrt(1 - (1 - sigma0^2) exp(-int beta))`.
    pub fn marginal_params(&self, t: f64) -> Result<(f64, f64)> {
        let b = self.integral_beta(t)?;
        let mean_scale = (-0.5 * b).exp();
        let var = 1.0 - (1.0 - self.sigma0 * self.sigma0) * (-b).exp();
        Ok((mean_scale, var.max(0.0).sqrt()))
    }

    /// Draw `Z^t = mean_scale * z0 + sigma * noise`.
    pub fn sample_transition(
        &self,
        z0: &Array2<f64>,
        t: f64,
        noise: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if z0.dim() != noise.dim() {
            return Err(Error::dim(format!(
                "z0 is {:?} but noise is {:?}",
                z0.dim(),
                noise.dim()
            )));
        }
        let (mean_scale, sigma) = self.marginal_params(t)?;
        Ok(z0 * mean_scale + noise * sigma)
    }

    /// Additive constant of the cross-entropy bound,
    /// `N d log(2 pi e sigma_{eps_t}^2)`.
    pub fn cross_entropy_constant(&self, n: usize, d: usize) -> Result<f64> {
        let (_, sigma) = self.marginal_params(self.eps_t)?;
        if sigma <= 0.0 {
            return Err(Error::range(
                "cross-entropy constant undefined at sigma_{eps_t} = 0; raise eps_t or sigma0",
            ));
        }
        let per_dim = (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln();
        Ok((n * d) as f64 * per_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSampling {
    Uniform,
    Importance,
}

/// A sampled objective time together with the weight that keeps the
/// `t ~ U[eps_t, 1]` expectation unbiased.
#[derive(Debug, Clone, Copy)]
pub struct SampledTime {
    pub t: f64,
    pub weight: f64,
}

/// Samples objective times. Importance mode draws `t` with density
/// proportional to `g(t)^2 / sigma_t^2` via an inverse-CDF table, which
/// down-weights the noisy small-`t` region of the score objective.
#[derive(Debug, Clone)]
pub struct TimeSampler {
    cfg: VpsdeConfig,
    mode: TimeSampling,
    // inverse-CDF interpolation table for importance mode
    grid: Vec<f64>,
    cdf: Vec<f64>,
    density: Vec<f64>,
}

impl TimeSampler {
    const TABLE_POINTS: usize = 1000;

    pub fn new(cfg: VpsdeConfig, mode: TimeSampling) -> Result<Self> {
        cfg.validate()?;
        let mut sampler = Self {
            cfg,
            mode,
            grid: Vec::new(),
            cdf: Vec::new(),
            density: Vec::new(),
        };
        if mode == TimeSampling::Importance {
            sampler.build_table()?;
        }
        Ok(sampler)
    }

    fn build_table(&mut self) -> Result<()> {
        let eps = self.cfg.eps_t.max(1e-6);
        let k = Self::TABLE_POINTS;
        let mut grid = Vec::with_capacity(k + 1);
        let mut raw = Vec::with_capacity(k + 1);
        for i in 0..=k {
            let t = eps + (1.0 - eps) * i as f64 / k as f64;
            let (_, sigma) = self.cfg.marginal_params(t)?;
            let g2 = self.cfg.beta(t)?;
            grid.push(t);
            raw.push(g2 / (sigma * sigma));
        }
        // trapezoid cumulative, then normalize to a probability density
        let mut cdf = vec![0.0];
        for i in 1..=k {
            let h = grid[i] - grid[i - 1];
            cdf.push(cdf[i - 1] + 0.5 * h * (raw[i] + raw[i - 1]));
        }
        let total = *cdf.last().unwrap();
        for c in cdf.iter_mut() {
            *c /= total;
        }
        for r in raw.iter_mut() {
            *r /= total;
        }
        self.grid = grid;
        self.cdf = cdf;
        self.density = raw;
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> SampledTime {
        let eps = self.cfg.eps_t;
        match self.mode {
            TimeSampling::Uniform => {
                let u: f64 = rng.gen();
                SampledTime {
                    t: eps + (1.0 - eps) * u,
                    weight: 1.0,
                }
            }
            TimeSampling::Importance => {
                let u: f64 = rng.gen();
                let i = match self.cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                    Ok(i) => i,
                    Err(i) => i.clamp(1, self.cdf.len() - 1),
                };
                let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
                let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
                let t = self.grid[i - 1] + frac * (self.grid[i] - self.grid[i - 1]);
                let p = self.density[i - 1] + frac * (self.density[i] - self.density[i - 1]);
                let uniform_density = 1.0 / (1.0 - eps);
                SampledTime {
                    t,
                    weight: uniform_density / p,
                }
            }
        }
    }
}

/// A latent node-vector matrix at diffusion time `t`.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub latent: Array2<f64>,
    pub time: f64,
}

impl DiffusionState {
    pub fn new(latent: Array2<f64>, time: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&time) {
            return Err(Error::range(format!("time = {time} outside [0, 1]")));
        }
        if !latent.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                message: "non-finite latent state".into(),
                checkpoint: None,
            });
        }
        Ok(Self { latent, time })
    }
}

/// Matrix of standard-normal draws.
pub fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> VpsdeConfig {
        VpsdeConfig::default()
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        let c = cfg();
        assert!((c.beta(0.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((c.beta(1.0).unwrap() - 20.0).abs() < 1e-15);
        assert!((c.beta(0.5).unwrap() - 10.05).abs() < 1e-12);
        assert!(c.beta(1.5).is_err());
        assert!(c.beta(-0.1).is_err());
    }

    #[test]
    fn drift_and_diffusion() {
        let c = cfg();
        assert!((c.drift_coeff(0.0).unwrap() + 0.05).abs() < 1e-15);
        assert!((c.diffusion_coeff(0.0).unwrap() - 0.1f64.sqrt()).abs() < 1e-15);
        assert!((c.drift_coeff(1.0).unwrap() + 10.0).abs() < 1e-12);
        assert!((c.diffusion_coeff(1.0).unwrap() - 20.0f64.sqrt()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..32 {
            let t: f64 = rand::Rng::gen(&mut rng);
            let g = c.diffusion_coeff(t).unwrap();
            assert!((g * g - c.beta(t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn integral_beta_closed_form_matches_quadrature() {
        let c = cfg();
        assert_eq!(c.integral_beta(0.0).unwrap(), 0.0);
        assert!((c.integral_beta(1.0).unwrap() - 10.05).abs() < 1e-12);
        for k in 1..10 {
            let t = k as f64 / 10.0;
            // trapezoid quadrature of the (linear) rate is exact up to rounding
            let steps = 100_000;
            let mut acc = 0.0;
            for i in 0..steps {
                let a = t * i as f64 / steps as f64;
                let b = t * (i + 1) as f64 / steps as f64;
                acc += 0.5 * (b - a) * (c.beta(a).unwrap() + c.beta(b).unwrap());
            }
            assert!(
                (acc - c.integral_beta(t).unwrap()).abs() < 1e-10,
                "t = {t}"
            );
        }
    }

    #[test]
    fn marginal_at_zero_and_one() {
        let c = cfg();
        let (ms, sigma) = c.marginal_params(0.0).unwrap();
        assert_eq!((ms, sigma), (1.0, 0.0));
        let (ms1, sigma1) = c.marginal_params(1.0).unwrap();
        assert!((ms1 - (-5.025f64).exp()).abs() < 1e-12);
        assert!((ms1 - 6.55e-3).abs() < 1e-4);
        assert!((sigma1 - (1.0 - (-10.05f64).exp()).sqrt()).abs() < 1e-12);
        assert!((sigma1 - 0.99998).abs() < 1e-5);
    }

    /// Monte-Carlo oracle: forward Euler-Maruyama of the SDE from z0 = 1 must
    /// reproduce the closed-form mean scale and standard deviation. This is
    /// the authority for mid-range t values.
    fn em_forward_moments(c: &VpsdeConfig, t_end: f64, paths: usize, dt: f64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let steps = (t_end / dt).round() as usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for p in 0..paths {
            let mut z = 1.0f64;
            for s in 0..steps {
                let t = s as f64 * dt;
                let noise: f64 = rng.sample(StandardNormal);
                let beta = c.beta(t).unwrap();
                z += -0.5 * beta * z * dt + beta.sqrt() * dt.sqrt() * noise;
            }
            let delta = z - mean;
            mean += delta / (p + 1) as f64;
            m2 += delta * (z - mean);
        }
        let std = (m2 / (paths - 1) as f64).sqrt();
        (mean, std)
    }

    #[test]
    fn marginal_mid_range_matches_em_oracle() {
        let c = cfg();
        // frozen from the oracle (1e5 paths, dt = 1e-4): t = 0.5 gives
        // mean_scale ~ 0.2812 and sigma ~ 0.9597
        let (ms, sigma) = c.marginal_params(0.5).unwrap();
        assert!((ms - 0.28118).abs() / 0.28118 < 1e-3, "ms = {ms}");
        assert!((sigma - 0.95965).abs() / 0.95965 < 1e-3, "sigma = {sigma}");

        let (em_mean, em_std) = em_forward_moments(&c, 0.5, 20_000, 1e-3);
        assert!((em_mean - ms).abs() / ms.abs() < 0.05, "em mean {em_mean} vs {ms}");
        assert!((em_std - sigma).abs() / sigma < 0.02, "em std {em_std} vs {sigma}");
    }

    #[test]
    fn transition_kernel() {
        let c = cfg();
        let z0 = Array2::from_shape_fn((3, 2), |(i, j)| (i + 2 * j) as f64 - 1.5);
        let zero = Array2::zeros((3, 2));
        // t = 0 with sigma0 = 0 returns z0 exactly
        let zt = c.sample_transition(&z0, 0.0, &zero).unwrap();
        assert_eq!(zt, z0);
        // zero noise gives the scaled mean
        let (ms, _) = c.marginal_params(0.3).unwrap();
        let zt = c.sample_transition(&z0, 0.3, &zero).unwrap();
        assert!((&zt - &(&z0 * ms)).iter().all(|v| v.abs() < 1e-15));
        // shape mismatch errors
        assert!(c.sample_transition(&z0, 0.3, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn transition_moments_match_marginal() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = Array2::from_elem((1, 1), 1.0);
        let t = 0.25;
        let (ms, sigma) = c.marginal_params(t).unwrap();
        let draws = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..draws {
            let noise = standard_normal(1, 1, &mut rng);
            let zt = c.sample_transition(&z0, t, &noise).unwrap()[(0, 0)];
            sum += zt;
            sumsq += zt * zt;
        }
        let mean = sum / draws as f64;
        let std = (sumsq / draws as f64 - mean * mean).sqrt();
        assert!((mean - ms).abs() / ms < 0.01, "mean {mean} vs {ms}");
        assert!((std - sigma).abs() / sigma < 0.01, "std {std} vs {sigma}");
    }

    #[test]
    fn monotone_schedules_and_variance_preservation() {
        let c = cfg();
        let mut prev_sigma = -1.0;
        let mut prev_ms = 2.0;
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let (ms, sigma) = c.marginal_params(t).unwrap();
            assert!(sigma >= prev_sigma);
            assert!(ms <= prev_ms);
            assert!(ms * ms + sigma * sigma <= 1.0 + 1e-9);
            prev_sigma = sigma;
            prev_ms = ms;
        }
    }

    #[test]
    fn uniform_time_sampling_moments() {
        let c = cfg();
        let sampler = TimeSampler::new(c, TimeSampling::Uniform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let s = sampler.sample(&mut rng);
            assert!(s.t >= c.eps_t && s.t <= 1.0);
            assert_eq!(s.weight, 1.0);
            sum += s.t;
        }
        let mean = sum / draws as f64;
        let expected = (1.0 + c.eps_t) / 2.0;
        assert!((mean - expected).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn importance_sampling_is_unbiased_for_constants() {
        let c = cfg();
        let sampler = TimeSampler::new(c, TimeSampling::Importance).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let mut weighted = 0.0;
        for _ in 0..draws {
            let s = sampler.sample(&mut rng);
            assert!(s.t >= c.eps_t && s.t <= 1.0);
            weighted += s.weight * 1.0;
        }
        let estimate = weighted / draws as f64;
        assert!((estimate - 1.0).abs() < 0.01, "estimate = {estimate}");
    }

    #[test]
    fn cross_entropy_constant_values() {
        // per-dimension value with sigma forced to 1: log(2 pi e)
        let forced = VpsdeConfig {
            beta0: 60.0,
            beta1: 60.0,
            eps_t: 0.9,
            sigma0: 0.0,
        };
        let (_, sigma) = forced.marginal_params(forced.eps_t).unwrap();
        assert!((sigma - 1.0).abs() < 1e-9);
        let v = forced.cross_entropy_constant(1, 1).unwrap();
        assert!((v - 2.837877066409345).abs() < 1e-6, "v = {v}");

        // linear in N * d
        let c = cfg();
        let one = c.cross_entropy_constant(3, 4).unwrap();
        let two = c.cross_entropy_constant(3, 8).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);

        // defaults: sigma^2 at eps_t = 1 - exp(-0.001995), per-dimension
        // constant log(2 pi e sigma^2) ~ -3.380 (closed form; the quadrature
        // oracle for the integral is exercised above)
        let per_dim = c.cross_entropy_constant(1, 1).unwrap();
        let sigma2 = 1.0 - (-(0.001 + 0.000995f64)).exp();
        assert!((sigma2 - 1.993e-3).abs() < 1e-6);
        let expected = (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma2).ln();
        assert!((per_dim - expected).abs() < 1e-12);
        assert!((per_dim + 3.3804).abs() < 1e-3, "per_dim = {per_dim}");
    }

    #[test]
    fn cross_entropy_requires_cutoff() {
        let c = VpsdeConfig {
            eps_t: 0.0,
            sigma0: 0.0,
            ..cfg()
        };
        assert!(c.cross_entropy_constant(1, 1).is_err());
    }
}
