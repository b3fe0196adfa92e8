//! Losses of the corrector stages, with exact parameter gradients.

use rand::Rng;

use crate::audio::MixtureExample;
use crate::bridge::{sample_kernel, BridgeConfig, KernelSample};
use crate::error::{check_len, Error, Result};
use crate::metrics::{si_snr_with_grad, PitResult};
use crate::models::{score_backward, score_forward, Objective, ScoreArch, SeparatorModel};
use crate::rng;
use crate::sampler::{OneStepPlan, ReverseOptions, ScoreFn};

/// Minimum kernel std accepted for a DSM target.
pub const MIN_DSM_SIGMA: f64 = 1e-6;
const MAX_T_RETRIES: usize = 10;

/// A mixture with its separator outputs, reordered so `estimates[k]`
/// pairs with `references[k]` under the uPIT assignment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub mixture: Vec<f64>,
    pub references: Vec<Vec<f64>>,
    pub estimates: Vec<Vec<f64>>,
    pub pit: PitResult,
}

impl Prepared {
    pub fn new(separator: &SeparatorModel, example: &MixtureExample) -> Result<Self> {
        let references: Vec<Vec<f64>> = example.sources.iter().map(|s| s.samples.clone()).collect();
        let mixture = example.mixture.samples.clone();
        let (estimates, pit) = separator.separate_matched(&mixture, &references)?;
        Ok(Self {
            mixture,
            references,
            estimates,
            pit,
        })
    }
}

/// Everything drawn for one DSM evaluation.
#[derive(Debug, Clone)]
pub struct DsmDraw {
    pub speaker: usize,
    pub kernel: KernelSample,
}

/// Picks a speaker uniformly, samples `t ~ U[t_eps, T]` and draws `x_t`.
/// Times whose kernel std falls below [`MIN_DSM_SIGMA`] are redrawn.
pub fn draw_dsm(prepared: &Prepared, bridge: &BridgeConfig, seed: u64) -> Result<DsmDraw> {
    let mut r = rng::stream(seed, 0xd5);
    let speaker = r.random_range(0..prepared.references.len());
    for attempt in 0..MAX_T_RETRIES {
        let t = r.random_range(bridge.t_eps..=bridge.t_max);
        let kernel = sample_kernel(
            &prepared.references[speaker],
            &prepared.estimates[speaker],
            t,
            bridge,
            rng::derive(seed, attempt as u64 + 1),
        )?;
        if kernel.sigma_t >= MIN_DSM_SIGMA {
            return Ok(DsmDraw { speaker, kernel });
        }
    }
    Err(Error::Numeric(format!(
        "dsm: kernel std below {MIN_DSM_SIGMA} after {MAX_T_RETRIES} time draws"
    )))
}

/// `mean((score + z/σ)²)` for a given draw.
pub fn dsm_loss<F: ScoreFn + ?Sized>(score_fn: &F, prepared: &Prepared, draw: &DsmDraw) -> Result<f64> {
    let k = &draw.kernel;
    let out = score_fn.score(&k.x_t, &prepared.estimates[draw.speaker], &prepared.mixture, k.t)?;
    check_len("dsm: score", out.len(), k.z_t.len())?;
    let n = out.len() as f64;
    Ok(out
        .iter()
        .zip(&k.z_t)
        .map(|(f, z)| (f + z / k.sigma_t).powi(2))
        .sum::<f64>()
        / n)
}

/// One DSM evaluation with the frozen separator: uPIT-resolved pairing,
/// random speaker, random time, kernel draw, loss.
pub fn dsm_step<F: ScoreFn + ?Sized>(
    score_fn: &F,
    example: &MixtureExample,
    separator: &SeparatorModel,
    bridge: &BridgeConfig,
    seed: u64,
) -> Result<f64> {
    let prepared = Prepared::new(separator, example)?;
    let draw = draw_dsm(&prepared, bridge, seed)?;
    dsm_loss(score_fn, &prepared, &draw)
}

/// DSM loss of a fixed draw as a function of the score parameters.
pub struct DsmObjective<'a> {
    pub arch: ScoreArch,
    pub prepared: &'a Prepared,
    pub draw: &'a DsmDraw,
}

impl DsmObjective<'_> {
    fn evaluate(&self, params: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let k = &self.draw.kernel;
        let s_hat = &self.prepared.estimates[self.draw.speaker];
        let (out, cache) = score_forward(self.arch, params, &k.x_t, s_hat, &self.prepared.mixture, k.t)?;
        let n = out.len() as f64;
        let resid: Vec<f64> = out.iter().zip(&k.z_t).map(|(f, z)| f + z / k.sigma_t).collect();
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
        let grad = want_grad.then(|| {
            let d: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
            score_backward(self.arch, params, &cache, &d)
        });
        Ok((loss, grad))
    }
}

impl Objective for DsmObjective<'_> {
    fn loss(&self, params: &[f64]) -> Result<f64> {
        Ok(self.evaluate(params, false)?.0)
    }
    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (l, g) = self.evaluate(params, true)?;
        Ok((l, g.expect("requested")))
    }
}

/// Negative SI-SNR of the one-step corrected estimate of one speaker.
/// The start state and Brownian draw are fixed by `plan`, so the output is
/// `plan.base + plan.coeff · score(θ)`.
pub struct FastGecoObjective<'a> {
    pub arch: ScoreArch,
    pub plan: OneStepPlan,
    pub s_hat: &'a [f64],
    pub mixture: &'a [f64],
    pub reference: &'a [f64],
}

impl<'a> FastGecoObjective<'a> {
    pub fn new(
        arch: ScoreArch,
        prepared: &'a Prepared,
        speaker: usize,
        bridge: &BridgeConfig,
        seed: u64,
        opts: ReverseOptions,
    ) -> Result<Self> {
        let s_hat = &prepared.estimates[speaker];
        Ok(Self {
            arch,
            plan: OneStepPlan::new(s_hat, bridge, seed, opts)?,
            s_hat,
            mixture: &prepared.mixture,
            reference: &prepared.references[speaker],
        })
    }

    fn evaluate(&self, params: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let (out, cache) = score_forward(self.arch, params, &self.plan.x_start, self.s_hat, self.mixture, self.plan.t)?;
        let x0 = self.plan.apply(&out);
        let (value, g) = si_snr_with_grad(&x0, self.reference)?;
        let grad = want_grad.then(|| {
            let d: Vec<f64> = g.iter().map(|v| -self.plan.coeff * v).collect();
            score_backward(self.arch, params, &cache, &d)
        });
        Ok((-value, grad))
    }
}

impl Objective for FastGecoObjective<'_> {
    fn loss(&self, params: &[f64]) -> Result<f64> {
        Ok(self.evaluate(params, false)?.0)
    }
    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (l, g) = self.evaluate(params, true)?;
        Ok((l, g.expect("requested")))
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

/// Compares the analytic gradient with central differences on `n` coordinates.
///
/// Coordinates are drawn at random among those whose analytic gradient is at
/// least `1e-3` of the largest component, so the comparison is not swamped
/// by rounding on vanishing entries.
pub fn check_gradient<O: Objective + ?Sized>(objective: &O, params: &[f64], n: usize, seed: u64) -> Result<GradCheck> {
    let g = crate::models::grad(objective, params)?;
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut eligible: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= 1e-3 * gmax).collect();
    if eligible.is_empty() {
        return Err(Error::Degenerate("gradient check: gradient is identically zero".into()));
    }
    let mut r = rng::stream(seed, 0x9c);
    let mut coords = Vec::with_capacity(n);
    while coords.len() < n && !eligible.is_empty() {
        let j = r.random_range(0..eligible.len());
        coords.push(eligible.swap_remove(j));
    }
    coords.sort_unstable();
    let mut p = params.to_vec();
    let mut numeric = Vec::with_capacity(coords.len());
    let mut max_rel_err = 0.0f64;
    for &i in &coords {
        let h = 1e-5 * params[i].abs().max(1e-2);
        p[i] = params[i] + h;
        let up = objective.loss(&p)?;
        p[i] = params[i] - h;
        let down = objective.loss(&p)?;
        p[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        max_rel_err = max_rel_err.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()));
        numeric.push(fd);
    }
    Ok(GradCheck {
        analytic: coords.iter().map(|&i| g[i]).collect(),
        coords,
        numeric,
        max_rel_err,
    })
}
