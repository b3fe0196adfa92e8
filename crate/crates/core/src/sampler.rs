//! Reverse-time Euler–Maruyama sampling of the bridge.
//!
//! Starting from `x_{T'} ~ N(ŝ, σ(T')² I)`, each step on the grid
//! `t_i = T'·i/M` computes
//!
//! ```text
//! x_{t-Δt} = x_t + [-f(x_t, ŝ) + g(t)² score(x_t, ŝ, y, t)] Δt + g(t) √Δt z
//! ```
//!
//! The single-step corrector is the same update with `M = 1`, so both
//! paths share [`eum_step`] and the seed layout: the start noise comes from
//! stream 0 of the seed and step `i` draws from stream `i`.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::bridge::{drift, Schedule};
use crate::error::{check_len, Error, Result};
use crate::rng;

/// Anything that can estimate the score `∇ log p_t(x_t | ŝ)`.
pub trait ScoreFn: Sync {
    fn score(&self, x_t: &[f64], s_hat: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<F> ScoreFn for F
where
    F: Fn(&[f64], &[f64], &[f64], f64) -> Vec<f64> + Sync,
{
    fn score(&self, x_t: &[f64], s_hat: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self(x_t, s_hat, y, t))
    }
}

/// Wraps a score function and counts its evaluations.
pub struct CountingScore<'a, S: ScoreFn + ?Sized> {
    inner: &'a S,
    calls: AtomicUsize,
}

impl<'a, S: ScoreFn + ?Sized> CountingScore<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<S: ScoreFn + ?Sized> ScoreFn for CountingScore<'_, S> {
    fn score(&self, x_t: &[f64], s_hat: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score(x_t, s_hat, y, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReverseOptions {
    /// Drop the Brownian term of the step that lands on `t = 0`.
    pub deterministic_final: bool,
    /// Start from `N(ŝ, σ(T')² I)`; when false, start exactly at `ŝ`.
    pub prior_noise: bool,
    /// Record every intermediate state.
    pub keep_trace: bool,
}

impl Default for ReverseOptions {
    fn default() -> Self {
        Self {
            deterministic_final: false,
            prior_noise: true,
            keep_trace: false,
        }
    }
}

/// States of one reverse run, from `t = T'` down to `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseTrace {
    pub states: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub seed: u64,
}

impl ReverseTrace {
    /// One row per grid time: the time followed by the state.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# rows={} length={}\n", self.times.len(), self.states.first().map_or(0, Vec::len));
        for (t, x) in self.times.iter().zip(&self.states) {
            out.push_str(&t.to_string());
            for v in x {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Grid time `t_i = T'·i/M`; exact at both ends.
pub fn grid_time(t_prime: f64, i: usize, steps: usize) -> f64 {
    t_prime * (i as f64 / steps as f64)
}

/// Draws the reverse starting point `x_{T'} = ŝ + σ(T') z`.
pub fn init_reverse<S: Schedule + ?Sized>(s_hat: &[f64], schedule: &S, seed: u64) -> Result<Vec<f64>> {
    let sigma = schedule.sigma(schedule.t_prime())?;
    let z = rng::standard_normal(&mut rng::stream(seed, 0), s_hat.len());
    Ok(s_hat.iter().zip(&z).map(|(s, z)| s + sigma * z).collect())
}

/// One reverse Euler–Maruyama step from `t` to `t - dt`.
#[allow(clippy::too_many_arguments)]
pub fn eum_step<F: ScoreFn + ?Sized, S: Schedule + ?Sized>(
    x: &[f64],
    s_hat: &[f64],
    y: &[f64],
    t: f64,
    dt: f64,
    score_fn: &F,
    schedule: &S,
    seed: u64,
    with_noise: bool,
) -> Result<Vec<f64>> {
    check_len("eum_step: x vs s_hat", x.len(), s_hat.len())?;
    check_len("eum_step: x vs y", x.len(), y.len())?;
    if !(dt > 0.0) || t - dt < -1e-12 {
        return Err(Error::Domain(format!("eum_step: invalid step t = {t}, dt = {dt}")));
    }
    let f = drift(x, s_hat, t)?;
    let score = score_fn.score(x, s_hat, y, t)?;
    check_len("eum_step: score", score.len(), x.len())?;
    if let Some(i) = score.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("eum_step: non-finite score at t = {t}, index {i}")));
    }
    let g = schedule.diffusion(t);
    let g2 = g * g;
    let mut out: Vec<f64> = x
        .iter()
        .zip(&f)
        .zip(&score)
        .map(|((xi, fi), si)| xi + (-fi + g2 * si) * dt)
        .collect();
    if with_noise {
        let z = rng::standard_normal(&mut rng::stream(seed, 0), x.len());
        let k = g * dt.sqrt();
        out.iter_mut().zip(&z).for_each(|(o, z)| *o += k * z);
    }
    Ok(out)
}

fn step_seed(seed: u64, i: usize) -> u64 {
    rng::derive(seed, i as u64)
}

/// Multi-step reverse sampling over `[0, T']` with `M` equal steps.
pub fn reverse_geco<F: ScoreFn + ?Sized, S: Schedule + ?Sized>(
    s_hat: &[f64],
    y: &[f64],
    score_fn: &F,
    schedule: &S,
    seed: u64,
    opts: ReverseOptions,
) -> Result<(Vec<f64>, Option<ReverseTrace>)> {
    check_len("reverse: s_hat vs y", s_hat.len(), y.len())?;
    let steps = schedule.steps();
    if steps == 0 {
        return Err(Error::Domain("reverse: need at least one step".into()));
    }
    let t_prime = schedule.t_prime();
    let dt = t_prime / steps as f64;
    let mut x = if opts.prior_noise {
        init_reverse(s_hat, schedule, seed)?
    } else {
        s_hat.to_vec()
    };
    let mut trace = opts.keep_trace.then(|| ReverseTrace {
        states: vec![x.clone()],
        times: vec![t_prime],
        seed,
    });
    for i in (1..=steps).rev() {
        let t = grid_time(t_prime, i, steps);
        let with_noise = !(opts.deterministic_final && i == 1);
        x = eum_step(&x, s_hat, y, t, dt, score_fn, schedule, step_seed(seed, i), with_noise).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("reverse step {} of {steps}: {m}", steps + 1 - i)),
            other => other,
        })?;
        if let Some(tr) = trace.as_mut() {
            tr.states.push(x.clone());
            tr.times.push(grid_time(t_prime, i - 1, steps));
        }
    }
    Ok((x, trace))
}

/// A schedule view that forces a single reverse step.
struct OneStep<'a, S: ?Sized>(&'a S);

impl<S: Schedule + ?Sized> Schedule for OneStep<'_, S> {
    fn diffusion(&self, t: f64) -> f64 {
        self.0.diffusion(t)
    }
    fn sigma(&self, t: f64) -> Result<f64> {
        self.0.sigma(t)
    }
    fn time_range(&self) -> (f64, f64) {
        self.0.time_range()
    }
    fn t_prime(&self) -> f64 {
        self.0.t_prime()
    }
    fn steps(&self) -> usize {
        1
    }
}

/// Single reverse step from `T'` straight to `0`.
pub fn one_step_fastgeco<F: ScoreFn + ?Sized, S: Schedule + ?Sized>(
    s_hat: &[f64],
    y: &[f64],
    score_fn: &F,
    schedule: &S,
    seed: u64,
    opts: ReverseOptions,
) -> Result<Vec<f64>> {
    let opts = ReverseOptions {
        keep_trace: false,
        ..opts
    };
    Ok(reverse_geco(s_hat, y, score_fn, &OneStep(schedule), seed, opts)?.0)
}

/// The pieces of a one-step correction that fine-tuning differentiates
/// through: `x̂_0 = base + coeff · score(x_{T'}, ŝ, y, T')`.
#[derive(Debug, Clone)]
pub struct OneStepPlan {
    pub x_start: Vec<f64>,
    /// Everything in the update except the score term.
    pub base: Vec<f64>,
    /// `T' · g(T')²`, the sensitivity of the output to the score.
    pub coeff: f64,
    pub t: f64,
}

impl OneStepPlan {
    pub fn new<S: Schedule + ?Sized>(s_hat: &[f64], schedule: &S, seed: u64, opts: ReverseOptions) -> Result<Self> {
        let t = schedule.t_prime();
        let x_start = if opts.prior_noise {
            init_reverse(s_hat, schedule, seed)?
        } else {
            s_hat.to_vec()
        };
        let zero = vec![0.0; s_hat.len()];
        let zero_score = |_: &[f64], _: &[f64], _: &[f64], _: f64| zero.clone();
        let base = eum_step(
            &x_start,
            s_hat,
            &zero,
            t,
            t,
            &zero_score,
            schedule,
            step_seed(seed, 1),
            !opts.deterministic_final,
        )?;
        let g = schedule.diffusion(t);
        Ok(Self {
            x_start,
            base,
            coeff: t * g * g,
            t,
        })
    }

    pub fn apply(&self, score: &[f64]) -> Vec<f64> {
        self.base.iter().zip(score).map(|(b, s)| b + self.coeff * s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::BridgeConfig;

    struct Quiet {
        t_prime: f64,
        steps: usize,
    }
    impl Schedule for Quiet {
        fn diffusion(&self, _: f64) -> f64 {
            0.0
        }
        fn sigma(&self, _: f64) -> Result<f64> {
            Ok(0.0)
        }
        fn time_range(&self) -> (f64, f64) {
            (0.03, 0.999)
        }
        fn t_prime(&self) -> f64 {
            self.t_prime
        }
        fn steps(&self) -> usize {
            self.steps
        }
    }

    fn zero_score(x: &[f64], _: &[f64], _: &[f64], _: f64) -> Vec<f64> {
        vec![0.0; x.len()]
    }

    #[test]
    fn pure_drift_step() {
        let q = Quiet { t_prime: 0.5, steps: 1 };
        let out = eum_step(&[0.0], &[1.0], &[0.0], 0.5, 0.25, &zero_score, &q, 0, true).unwrap();
        assert_eq!(out, vec![-0.5]);
    }

    #[test]
    fn step_shrinks_with_dt() {
        let cfg = BridgeConfig::default();
        let x = vec![0.2; 16];
        let s = vec![0.5; 16];
        let mut prev = f64::INFINITY;
        for dt in [1e-1, 1e-2, 1e-3, 1e-4] {
            let out = eum_step(&x, &s, &s, 0.5, dt, &zero_score, &cfg, 3, false).unwrap();
            let d = out.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < prev);
            assert!((d / dt - 0.6).abs() < 1e-9, "drift-only step is linear in dt");
            prev = d;
        }
    }

    #[test]
    fn rejects_bad_steps_and_scores() {
        let cfg = BridgeConfig::default();
        let x = [0.0, 1.0];
        assert!(eum_step(&x, &x, &x, 0.1, 0.2, &zero_score, &cfg, 0, true).is_err());
        assert!(eum_step(&x, &x, &x, 0.1, 0.0, &zero_score, &cfg, 0, true).is_err());
        let nan = |x: &[f64], _: &[f64], _: &[f64], _: f64| vec![f64::NAN; x.len()];
        let err = reverse_geco(&x, &x, &nan, &cfg, 0, ReverseOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("step 1 of 30")), "{err}");
    }

    #[test]
    fn init_reverse_contract() {
        let q = Quiet { t_prime: 0.5, steps: 1 };
        let s = vec![0.3, -0.2, 0.9];
        assert_eq!(init_reverse(&s, &q, 5).unwrap(), s);
        let cfg = BridgeConfig::default();
        assert_eq!(init_reverse(&s, &cfg, 5).unwrap(), init_reverse(&s, &cfg, 5).unwrap());

        let n = 100_000;
        let draws = init_reverse(&vec![0.0; n], &cfg, 11).unwrap();
        let m = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let want = cfg.sigma(0.5).unwrap();
        assert!((sd - want).abs() < 3.0 * want / (2.0 * n as f64).sqrt(), "{sd} vs {want}");
    }

    #[test]
    fn one_step_pure_drift_closed_form() {
        // x0 = x + T'·(x - ŝ)/(1 - T') when score and diffusion vanish.
        let q = Quiet { t_prime: 0.5, steps: 1 };
        let s = vec![0.25, -1.0];
        let y = vec![0.0; 2];
        let out = one_step_fastgeco(&s, &y, &zero_score, &q, 1, ReverseOptions::default()).unwrap();
        assert_eq!(out, s, "x_T' = ŝ so the drift vanishes");
        let opts = ReverseOptions {
            prior_noise: false,
            ..Default::default()
        };
        let shifted = |x: &[f64], _: &[f64], _: &[f64], _: f64| vec![0.0; x.len()];
        let x = eum_step(&[1.0, 2.0], &s, &y, 0.5, 0.5, &shifted, &q, 0, true).unwrap();
        assert_eq!(x, vec![1.0 + 0.5 * 0.75 / 0.5, 2.0 + 0.5 * 3.0 / 0.5]);
        assert_eq!(one_step_fastgeco(&s, &y, &zero_score, &q, 9, opts).unwrap(), s);
    }

    #[test]
    fn one_step_equals_single_step_reverse() {
        let cfg = BridgeConfig {
            steps: 1,
            ..Default::default()
        };
        let s: Vec<f64> = (0..50).map(|i| (i as f64 * 0.2).sin()).collect();
        let y: Vec<f64> = s.iter().map(|v| v * 1.3).collect();
        let score = |x: &[f64], s: &[f64], _: &[f64], t: f64| -> Vec<f64> {
            x.iter().zip(s).map(|(a, b)| (b - a) * t).collect()
        };
        for seed in 0..5 {
            let a = reverse_geco(&s, &y, &score, &cfg, seed, ReverseOptions::default()).unwrap().0;
            let b = one_step_fastgeco(&s, &y, &score, &BridgeConfig::default(), seed, ReverseOptions::default()).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, one_step_fastgeco(&s, &y, &score, &cfg, seed, ReverseOptions::default()).unwrap());
        }
    }

    #[test]
    fn plan_matches_sampler() {
        let cfg = BridgeConfig::default();
        let s: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).cos()).collect();
        let y = s.clone();
        let score = |x: &[f64], s: &[f64], _: &[f64], _: f64| -> Vec<f64> {
            x.iter().zip(s).map(|(a, b)| 2.0 * (b - a)).collect()
        };
        for det in [false, true] {
            let opts = ReverseOptions {
                deterministic_final: det,
                ..Default::default()
            };
            let plan = OneStepPlan::new(&s, &cfg, 4, opts).unwrap();
            let sc = score(&plan.x_start, &s, &y, plan.t);
            let via_plan = plan.apply(&sc);
            let direct = one_step_fastgeco(&s, &y, &score, &cfg, 4, opts).unwrap();
            for (a, b) in via_plan.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trace_grid() {
        let cfg = BridgeConfig::default();
        let s = vec![0.1; 8];
        let opts = ReverseOptions {
            keep_trace: true,
            ..Default::default()
        };
        let (x, tr) = reverse_geco(&s, &s, &zero_score, &cfg, 2, opts).unwrap();
        let tr = tr.unwrap();
        assert_eq!(tr.times.len(), 31);
        assert_eq!(tr.states.len(), 31);
        assert_eq!(tr.times[0], 0.5);
        assert_eq!(tr.times[30], 0.0);
        assert_eq!(tr.states[30], x);
        for (i, t) in tr.times.iter().enumerate() {
            assert!((t - 0.5 * (30 - i) as f64 / 30.0).abs() < 1e-15);
        }
        assert!(tr.states.iter().flatten().all(|v| v.is_finite()));
        assert_eq!(tr.to_csv().lines().count(), 32);
    }

    #[test]
    fn counts_score_calls() {
        let cfg = BridgeConfig::default();
        let s = vec![0.1; 8];
        let counter = CountingScore::new(&zero_score);
        reverse_geco(&s, &s, &counter, &cfg, 0, ReverseOptions::default()).unwrap();
        assert_eq!(counter.calls(), 30);
        let counter = CountingScore::new(&zero_score);
        one_step_fastgeco(&s, &s, &counter, &cfg, 0, ReverseOptions::default()).unwrap();
        assert_eq!(counter.calls(), 1);
    }
}
