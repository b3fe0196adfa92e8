//! Brownian bridge with exponential diffusion (BBED).
//!
//! The forward process runs from a clean signal `x0` at `t = 0` towards
//! the separator estimate `s_hat` at `t = 1`:
//!
//! ```text
//! dx = (s_hat - x) / (1 - t) dt + c v^t dw
//! ```
//!
//! and has the closed-form Gaussian kernel
//! `x_t ~ N((1 - t) x0 + t s_hat, sigma(t)^2 I)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng;
use crate::specfun::expint_ei;

/// Radicands of `sigma(t)^2` down to this value are treated as rounding noise.
pub const RADICAND_CLAMP: f64 = -1e-12;

/// BBED schedule and reverse-sampling constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    /// Diffusion scale.
    pub c: f64,
    /// Diffusion base; `g(t) = c v^t`.
    pub v: f64,
    /// Terminal diffusion time, slightly below 1.
    pub t_max: f64,
    /// Smallest time used in training.
    pub t_eps: f64,
    /// Reverse-sampling start time.
    pub t_prime: f64,
    /// Number of reverse Euler–Maruyama steps.
    pub steps: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            c: 0.51,
            v: 2.6,
            t_max: 0.999,
            t_eps: 0.03,
            t_prime: 0.5,
            steps: 30,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        let fin = [self.c, self.v, self.t_max, self.t_eps, self.t_prime]
            .iter()
            .all(|x| x.is_finite());
        if !fin {
            return Err(Error::Config("bridge: non-finite constant".into()));
        }
        if self.c <= 0.0 {
            return Err(Error::Config(format!("bridge: c = {} must be > 0", self.c)));
        }
        if self.v <= 0.0 || self.v == 1.0 {
            return Err(Error::Config(format!(
                "bridge: v = {} must be > 0 and != 1",
                self.v
            )));
        }
        if !(0.0 < self.t_eps
            && self.t_eps < self.t_prime
            && self.t_prime <= self.t_max
            && self.t_max < 1.0)
        {
            return Err(Error::Config(format!(
                "bridge: need 0 < t_eps ({}) < t_prime ({}) <= t_max ({}) < 1",
                self.t_eps, self.t_prime, self.t_max
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("bridge: steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Diffusion coefficient `g(t) = c v^t`.
    pub fn diffusion(&self, t: f64) -> f64 {
        self.c * self.v.powf(t)
    }

    /// Standard deviation of the perturbation kernel at time `t ∈ [0, 1]`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("sigma: t = {t} outside [0, 1]")));
        }
        if t == 0.0 || t == 1.0 {
            return Ok(0.0);
        }
        let ln_v = self.v.ln();
        let e = expint_ei(2.0 * (t - 1.0) * ln_v)? - expint_ei(-2.0 * ln_v)?;
        let bracket =
            (self.v.powf(2.0 * t) - 1.0 + t) + 2.0 * self.v * self.v * ln_v * (1.0 - t) * e;
        let radicand = (1.0 - t) * self.c * self.c * bracket;
        if radicand < RADICAND_CLAMP {
            return Err(Error::Numeric(format!(
                "sigma({t}): radicand {radicand:e} is negative (c = {}, v = {})",
                self.c, self.v
            )));
        }
        Ok(radicand.max(0.0).sqrt())
    }
}

/// Time-dependent noise schedule seen by the kernel sampler and the
/// reverse-time solver. [`BridgeConfig`] is the production implementation;
/// tests substitute degenerate schedules (zero noise, zero diffusion).
pub trait Schedule: Sync {
    fn diffusion(&self, t: f64) -> f64;
    fn sigma(&self, t: f64) -> Result<f64>;
    /// `(t_eps, t_max)`, the admissible training-time range.
    fn time_range(&self) -> (f64, f64);
    fn t_prime(&self) -> f64;
    fn steps(&self) -> usize;
}

impl Schedule for BridgeConfig {
    fn diffusion(&self, t: f64) -> f64 {
        BridgeConfig::diffusion(self, t)
    }
    fn sigma(&self, t: f64) -> Result<f64> {
        BridgeConfig::sigma(self, t)
    }
    fn time_range(&self) -> (f64, f64) {
        (self.t_eps, self.t_max)
    }
    fn t_prime(&self) -> f64 {
        self.t_prime
    }
    fn steps(&self) -> usize {
        self.steps
    }
}

/// Drift `(s_hat - x_t) / (1 - t)`.
pub fn drift(x_t: &[f64], s_hat: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len("drift", x_t.len(), s_hat.len())?;
    if !(t < 1.0) {
        return Err(Error::Domain(format!("drift: t = {t} must be < 1")));
    }
    let inv = 1.0 / (1.0 - t);
    Ok(x_t.iter().zip(s_hat).map(|(x, s)| (s - x) * inv).collect())
}

/// Kernel mean `(1 - t) x0 + t s_hat`.
pub fn mean(x0: &[f64], s_hat: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len("mean", x0.len(), s_hat.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("mean: t = {t} outside [0, 1]")));
    }
    Ok(x0
        .iter()
        .zip(s_hat)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

/// A draw from the perturbation kernel together with the noise that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSample {
    pub x_t: Vec<f64>,
    pub z_t: Vec<f64>,
    pub t: f64,
    pub sigma_t: f64,
}

/// Draws `x_t = mean(x0, s_hat, t) + sigma(t) z` with `z ~ N(0, I)` from `seed`.
pub fn sample_kernel<S: Schedule + ?Sized>(
    x0: &[f64],
    s_hat: &[f64],
    t: f64,
    schedule: &S,
    seed: u64,
) -> Result<KernelSample> {
    let (lo, hi) = schedule.time_range();
    if !(lo..=hi).contains(&t) {
        return Err(Error::Domain(format!(
            "sample_kernel: t = {t} outside [{lo}, {hi}]"
        )));
    }
    let mu = mean(x0, s_hat, t)?;
    let sigma_t = schedule.sigma(t)?;
    let z_t = rng::standard_normal(&mut rng::stream(seed, 0), x0.len());
    let x_t = mu.iter().zip(&z_t).map(|(m, z)| m + sigma_t * z).collect();
    Ok(KernelSample {
        x_t,
        z_t,
        t,
        sigma_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Silent;
    impl Schedule for Silent {
        fn diffusion(&self, _: f64) -> f64 {
            0.0
        }
        fn sigma(&self, _: f64) -> Result<f64> {
            Ok(0.0)
        }
        fn time_range(&self) -> (f64, f64) {
            (0.0, 0.999)
        }
        fn t_prime(&self) -> f64 {
            0.5
        }
        fn steps(&self) -> usize {
            1
        }
    }

    #[test]
    fn drift_examples() {
        assert_eq!(drift(&[0.3, -2.0], &[0.3, -2.0], 0.4).unwrap(), vec![0.0, 0.0]);
        assert_eq!(drift(&[0.0], &[1.0], 0.5).unwrap(), vec![2.0]);
        let x = [0.25, -1.5, 3.0];
        let s = [1.0, 0.5, -2.0];
        let d = drift(&x, &s, 0.999).unwrap();
        for i in 0..3 {
            let want = (s[i] - x[i]) * 1000.0;
            assert!((d[i] - want).abs() <= 1e-9 * want.abs());
        }
        assert!(matches!(drift(&x, &s, 1.0), Err(Error::Domain(_))));
        assert!(matches!(drift(&x, &s[..2], 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn diffusion_examples() {
        let cfg = BridgeConfig::default();
        assert_eq!(cfg.diffusion(0.0), 0.51);
        assert!((cfg.diffusion(1.0) - 1.326).abs() < 1e-12);
        assert!((cfg.diffusion(0.5) - 0.51 * 2.6f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn mean_pins_and_interpolates() {
        let x0 = [0.0, 4.0];
        let s = [4.0, 0.0];
        assert_eq!(mean(&x0, &s, 0.0).unwrap(), x0.to_vec());
        assert_eq!(mean(&x0, &s, 1.0).unwrap(), s.to_vec());
        assert_eq!(mean(&x0, &s, 0.25).unwrap(), vec![1.0, 3.0]);
        assert!(mean(&x0, &s[..1], 0.5).is_err());
    }

    #[test]
    fn sigma_pins_and_reference_values() {
        let cfg = BridgeConfig::default();
        assert_eq!(cfg.sigma(0.0).unwrap(), 0.0);
        assert_eq!(cfg.sigma(1.0).unwrap(), 0.0);
        // High-precision quadrature of (1-t)^2 ∫ g^2/(1-τ)^2 dτ.
        for (t, want) in [
            (0.5, 0.347_740_796_316_292_841_95),
            (0.03, 0.088_274_282_868_202_832_137),
            (0.999, 0.041_662_253_878_620_755_667),
            (0.25, 0.252_885_121_756_200_384_2),
            (0.9, 0.319_625_933_902_148_419_49),
        ] {
            let got = cfg.sigma(t).unwrap();
            assert!((got - want).abs() <= 1e-10 * want, "t={t}: {got} vs {want}");
        }
        assert!(cfg.sigma(1.5).is_err());
        assert!(cfg.sigma(-0.1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BridgeConfig::default().validate().is_ok());
        let bad = [
            BridgeConfig { c: 0.0, ..Default::default() },
            BridgeConfig { v: 1.0, ..Default::default() },
            BridgeConfig { t_max: 1.0, ..Default::default() },
            BridgeConfig { t_prime: 0.01, ..Default::default() },
            BridgeConfig { steps: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn kernel_sample_contract() {
        let cfg = BridgeConfig::default();
        let x0 = [0.1, 0.2, 0.3];
        let s = [0.3, 0.2, 0.1];
        let a = sample_kernel(&x0, &s, 0.5, &cfg, 42).unwrap();
        let b = sample_kernel(&x0, &s, 0.5, &cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sigma_t, cfg.sigma(0.5).unwrap());
        assert_eq!(a.x_t.len(), a.z_t.len());
        assert!(sample_kernel(&x0, &s, 0.01, &cfg, 1).is_err());
        assert!(sample_kernel(&x0, &s, 0.9995, &cfg, 1).is_err());

        let quiet = sample_kernel(&x0, &s, 0.0, &Silent, 3).unwrap();
        assert_eq!(quiet.x_t, x0.to_vec());
    }

    #[test]
    fn kernel_moments_match_closed_form() {
        let cfg = BridgeConfig::default();
        let x0 = [0.8];
        let s = [-0.4];
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|i| sample_kernel(&x0, &s, 0.5, &cfg, i).unwrap().x_t[0])
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        let want_sd = cfg.sigma(0.5).unwrap();
        let se_mean = want_sd / (n as f64).sqrt();
        let se_sd = want_sd / (2.0 * n as f64).sqrt();
        assert!((m - 0.2).abs() < 3.0 * se_mean, "mean {m}");
        assert!((sd - want_sd).abs() < 3.0 * se_sd, "sd {sd} vs {want_sd}");
    }
}
