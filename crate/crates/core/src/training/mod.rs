//! The three training stages: separator (uPIT), score model (denoising
//! score matching) and single-step fine-tuning through the sampler.
//!
//! All stages share one loop: shuffled minibatches, mean batch gradient,
//! global-norm clipping, an adaptive-moment update, and an end-of-epoch
//! validation pass. Every random draw is derived from `TrainConfig::seed`,
//! the epoch and the position in the epoch, so runs are reproducible and
//! a resumed run continues exactly where it stopped.

mod objectives;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use objectives::{
    check_gradient, draw_dsm, dsm_loss, dsm_step, DsmDraw, DsmObjective, FastGecoObjective, GradCheck, Prepared,
    MIN_DSM_SIGMA,
};
pub use optim::{clip_grad_norm, Adam};

use crate::audio::MixtureExample;
use crate::bridge::BridgeConfig;
use crate::error::{Error, Result};
use crate::metrics::{si_snr, si_snr_improvement};
use crate::models::{EmaState, Objective, PitObjective, ScoreModel, SeparatorModel, DEFAULT_EMA_DECAY};
use crate::rng;
use crate::sampler::{one_step_fastgeco, reverse_geco, ReverseOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ema_decay: f64,
    /// Maximum global gradient norm.
    pub grad_clip: f64,
    /// Invoke the checkpoint hook every this many epochs; 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            ema_decay: DEFAULT_EMA_DECAY,
            grad_clip: 5.0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("training: lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("training: epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("training: ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("training: grad_clip must be positive, got {}", self.grad_clip)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Separator,
    Geco,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Separator => "separator",
            Stage::Geco => "geco",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss_mean: f64,
    /// Mean SI-SNR improvement on the validation set, if one was given.
    pub val_si_snri: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub wall_clock_s: f64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            epochs: Vec::new(),
            best_epoch: None,
            wall_clock_s: 0.0,
            checkpoint: None,
        }
    }

    /// One JSON object per epoch followed by a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let mut v = serde_json::to_value(e).expect("serializable");
            v["stage"] = self.stage.name().into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "stage": self.stage.name(),
            "summary": true,
            "epochs_run": self.epochs.len(),
            "best_epoch": self.best_epoch,
            "wall_clock_s": self.wall_clock_s,
            "checkpoint": self.checkpoint,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    /// Loss and validation curves, ignoring timing.
    pub fn curves(&self) -> Vec<(usize, f64, Option<f64>)> {
        self.epochs.iter().map(|e| (e.epoch, e.loss_mean, e.val_si_snri)).collect()
    }
}

/// Complete optimizer-side state; enough to resume a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub adam: Adam,
    pub ema: Option<EmaState>,
    /// Best validation score so far and the parameters that achieved it.
    pub best: Option<(f64, Vec<f64>)>,
    pub report: TrainReport,
}

impl TrainState {
    pub fn epochs_done(&self) -> usize {
        self.report.epochs.len()
    }

    /// Parameters used for evaluation: EMA shadow if tracked, else raw.
    pub fn eval_params(&self) -> &[f64] {
        self.ema.as_ref().map_or(&self.params, |e| &e.shadow)
    }
}

/// Called with the training state after each checkpointed epoch.
pub type CheckpointHook<'a> = Box<dyn FnMut(&TrainState) -> Result<()> + 'a>;

/// Optional resume state and per-epoch checkpoint callback.
#[derive(Default)]
pub struct Control<'a> {
    pub resume: Option<TrainState>,
    pub on_checkpoint: Option<CheckpointHook<'a>>,
}

impl<'a> Control<'a> {
    pub fn none() -> Self {
        Self::default()
    }
}

fn check_data(stage: Stage, train: &[MixtureExample]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config(format!("{}: training set is empty", stage.name())));
    }
    Ok(())
}

/// Seed for position `pos` of `epoch` within stage-tagged stream `tag`.
fn seed_at(seed: u64, tag: u64, epoch: usize, pos: usize) -> u64 {
    rng::derive(rng::derive(rng::derive(seed, tag), epoch as u64), pos as u64)
}

struct LoopSpec {
    stage: Stage,
    use_ema: bool,
    keep_best: bool,
}

/// Shared minibatch loop. `batch_loss` returns the mean loss and gradient of
/// one batch; `validate` scores evaluation parameters (higher is better).
fn run_loop<B, V>(
    spec: LoopSpec,
    init: &[f64],
    n_train: usize,
    cfg: &TrainConfig,
    ctl: Control<'_>,
    mut batch_loss: B,
    mut validate: V,
) -> Result<TrainState>
where
    B: FnMut(usize, usize, &[usize], &[f64]) -> Result<(f64, Vec<f64>)>,
    V: FnMut(&[f64]) -> Result<Option<f64>>,
{
    cfg.validate()?;
    let Control {
        resume,
        mut on_checkpoint,
    } = ctl;
    let mut state = match resume {
        Some(s) => {
            if s.params.len() != init.len() || s.report.stage != spec.stage {
                return Err(Error::Config(format!(
                    "{}: resume state does not match this stage or model",
                    spec.stage.name()
                )));
            }
            s
        }
        None => TrainState {
            params: init.to_vec(),
            adam: Adam::new(init.len(), cfg.lr),
            ema: if spec.use_ema {
                Some(EmaState::new(init, cfg.ema_decay)?)
            } else {
                None
            },
            best: None,
            report: TrainReport::new(spec.stage),
        },
    };
    let start = Instant::now();
    let base_wall = state.report.wall_clock_s;
    for epoch in state.epochs_done()..cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng::stream(cfg.seed, 0x5f00 + epoch as u64));
        let mut losses = Vec::new();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, mut g) = batch_loss(epoch, step, batch, &state.params)?;
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "{}: diverged at epoch {} step {} (loss {loss})",
                    spec.stage.name(),
                    epoch + 1,
                    step + 1
                )));
            }
            clip_grad_norm(&mut g, cfg.grad_clip);
            state.adam.update(&mut state.params, &g)?;
            if let Some(e) = state.ema.as_mut() {
                e.update(&state.params)?;
            }
            losses.push(loss);
        }
        let val = validate(state.eval_params())?;
        if let Some(v) = val {
            if spec.keep_best && state.best.as_ref().is_none_or(|(b, _)| v > *b) {
                state.best = Some((v, state.eval_params().to_vec()));
                state.report.best_epoch = Some(epoch + 1);
            }
        }
        let loss_mean = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!(
            "{} epoch {}/{}: loss {loss_mean:.4}{}",
            spec.stage.name(),
            epoch + 1,
            cfg.epochs,
            val.map_or(String::new(), |v| format!(", val SI-SNRi {v:.2} dB"))
        );
        state.report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            steps: losses.len(),
            loss_mean,
            val_si_snri: val,
            wall_s: t0.elapsed().as_secs_f64(),
        });
        state.report.wall_clock_s = base_wall + start.elapsed().as_secs_f64();
        let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        if let Some(hook) = on_checkpoint.as_mut() {
            if due || epoch + 1 == cfg.epochs {
                hook(&state)?;
            }
        }
    }
    Ok(state)
}

/// Mean loss and gradient over a batch of objectives.
fn mean_grad<O: Objective>(objectives: &[O], params: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut acc = vec![0.0; params.len()];
    for o in objectives {
        let (l, g) = o.loss_and_grad(params)?;
        total += l;
        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let n = objectives.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok((total / n, acc))
}

fn mean_or_none(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean per-source SI-SNRi of the separator alone, uPIT-resolved.
pub fn separator_si_snri(sep: &SeparatorModel, data: &[MixtureExample]) -> Result<Option<f64>> {
    let mut all = Vec::new();
    for ex in data {
        let p = Prepared::new(sep, ex)?;
        for k in 0..p.references.len() {
            all.push(si_snr_improvement(&p.estimates[k], &p.references[k], &p.mixture)?);
        }
    }
    Ok(mean_or_none(&all))
}

/// Trains the separator with the uPIT SI-SNR loss. Returns the
/// best-validation parameters when a validation set is given.
pub fn train_separator(
    train: &[MixtureExample],
    val: &[MixtureExample],
    model: &SeparatorModel,
    cfg: &TrainConfig,
    ctl: Control<'_>,
) -> Result<(SeparatorModel, TrainState)> {
    check_data(Stage::Separator, train)?;
    let arch = model.arch;
    let refs: Vec<Vec<Vec<f64>>> = train
        .iter()
        .map(|e| e.sources.iter().map(|s| s.samples.clone()).collect())
        .collect();
    let state = run_loop(
        LoopSpec {
            stage: Stage::Separator,
            use_ema: false,
            keep_best: true,
        },
        &model.params,
        train.len(),
        cfg,
        ctl,
        |_, _, batch, params| {
            let objs: Vec<PitObjective> = batch
                .iter()
                .map(|&i| PitObjective {
                    arch,
                    mixture: &train[i].mixture.samples,
                    references: &refs[i],
                })
                .collect();
            mean_grad(&objs, params)
        },
        |params| separator_si_snri(&SeparatorModel::from_params(arch, params.to_vec())?, val),
    )?;
    let params = state.best.as_ref().map_or(&state.params, |(_, p)| p).clone();
    Ok((SeparatorModel::from_params(arch, params)?, state))
}

fn prepare_all(sep: &SeparatorModel, data: &[MixtureExample]) -> Result<Vec<Prepared>> {
    data.iter().map(|e| Prepared::new(sep, e)).collect()
}

/// How the corrector turns a separator estimate into its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorMode {
    /// `M` reverse steps.
    Multi,
    /// One reverse step of `T'`.
    Single,
}

/// Mean SI-SNRi over all speakers of `prepared` after correction with `score`.
pub fn corrector_si_snri(
    score: &ScoreModel,
    prepared: &[Prepared],
    bridge: &BridgeConfig,
    mode: CorrectorMode,
    seed: u64,
) -> Result<Option<f64>> {
    let mut all = Vec::new();
    for (i, p) in prepared.iter().enumerate() {
        for k in 0..p.references.len() {
            let s = rng::derive(seed, (i * p.references.len() + k) as u64);
            let out = match mode {
                CorrectorMode::Multi => {
                    reverse_geco(&p.estimates[k], &p.mixture, score, bridge, s, ReverseOptions::default())?.0
                }
                CorrectorMode::Single => {
                    one_step_fastgeco(&p.estimates[k], &p.mixture, score, bridge, s, ReverseOptions::default())?
                }
            };
            all.push(si_snr(&out, &p.references[k])? - si_snr(&p.mixture, &p.references[k])?);
        }
    }
    Ok(mean_or_none(&all))
}

/// Trains the score model with denoising score matching on bridge draws
/// around the frozen separator's estimates. Returns the EMA parameters.
pub fn train_geco(
    train: &[MixtureExample],
    val: &[MixtureExample],
    score: &ScoreModel,
    separator: &SeparatorModel,
    bridge: &BridgeConfig,
    cfg: &TrainConfig,
    ctl: Control<'_>,
) -> Result<(ScoreModel, TrainState)> {
    check_data(Stage::Geco, train)?;
    bridge.validate()?;
    score.arch.check_bridge(bridge)?;
    let arch = score.arch;
    let prepared = prepare_all(separator, train)?;
    let val_prepared = prepare_all(separator, val)?;
    let state = run_loop(
        LoopSpec {
            stage: Stage::Geco,
            use_ema: true,
            keep_best: false,
        },
        &score.params,
        train.len(),
        cfg,
        ctl,
        |epoch, step, batch, params| {
            let draws: Vec<DsmDraw> = batch
                .iter()
                .enumerate()
                .map(|(j, &i)| draw_dsm(&prepared[i], bridge, seed_at(cfg.seed, 0xd5, epoch, step * 4096 + j)))
                .collect::<Result<_>>()?;
            let objs: Vec<DsmObjective> = batch
                .iter()
                .zip(&draws)
                .map(|(&i, draw)| DsmObjective {
                    arch,
                    prepared: &prepared[i],
                    draw,
                })
                .collect();
            mean_grad(&objs, params)
        },
        |params| {
            let m = ScoreModel::from_params(arch, params.to_vec())?;
            corrector_si_snri(&m, &val_prepared, bridge, CorrectorMode::Multi, rng::derive(cfg.seed, 0x7a1))
        },
    )?;
    let shadow = state.eval_params().to_vec();
    Ok((ScoreModel::from_params(arch, shadow)?, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneOptions {
    /// Reuse the same start and Brownian noise for an example in every step.
    pub fixed_noise: bool,
    /// Check the gradient through the one-step path by finite differences
    /// before training starts.
    pub verify_gradient: bool,
}

/// Fine-tunes the score model so that a single reverse step maximizes the
/// SI-SNR of the corrected estimate, for every speaker of every example.
/// Returns the best-validation parameters when a validation set is given.
#[allow(clippy::too_many_arguments)]
pub fn finetune_fastgeco(
    train: &[MixtureExample],
    val: &[MixtureExample],
    score: &ScoreModel,
    separator: &SeparatorModel,
    bridge: &BridgeConfig,
    cfg: &TrainConfig,
    opts: FinetuneOptions,
    ctl: Control<'_>,
) -> Result<(ScoreModel, TrainState)> {
    check_data(Stage::Finetune, train)?;
    bridge.validate()?;
    score.arch.check_bridge(bridge)?;
    let arch = score.arch;
    let prepared = prepare_all(separator, train)?;
    let val_prepared = prepare_all(separator, val)?;
    let noise_seed = |epoch: usize, step: usize, j: usize, i: usize, k: usize| {
        if opts.fixed_noise {
            seed_at(cfg.seed, 0xf1, 0, i * 8 + k)
        } else {
            seed_at(cfg.seed, 0xf7, epoch, (step * 4096 + j) * 8 + k)
        }
    };
    if opts.verify_gradient {
        let obj = FastGecoObjective::new(arch, &prepared[0], 0, bridge, noise_seed(0, 0, 0, 0, 0), ReverseOptions::default())?;
        let check = check_gradient(&obj, &score.params, 20, cfg.seed)?;
        if check.max_rel_err > 1e-3 {
            return Err(Error::Numeric(format!(
                "finetune: one-step gradient disagrees with finite differences (max rel err {:.2e})",
                check.max_rel_err
            )));
        }
        log::info!("finetune: gradient check passed (max rel err {:.2e})", check.max_rel_err);
    }
    let state = run_loop(
        LoopSpec {
            stage: Stage::Finetune,
            use_ema: false,
            keep_best: true,
        },
        &score.params,
        train.len(),
        cfg,
        ctl,
        |epoch, step, batch, params| {
            let mut objs = Vec::new();
            for (j, &i) in batch.iter().enumerate() {
                for k in 0..prepared[i].references.len() {
                    let seed = noise_seed(epoch, step, j, i, k);
                    objs.push(FastGecoObjective::new(arch, &prepared[i], k, bridge, seed, ReverseOptions::default())?);
                }
            }
            mean_grad(&objs, params)
        },
        |params| {
            let m = ScoreModel::from_params(arch, params.to_vec())?;
            corrector_si_snri(&m, &val_prepared, bridge, CorrectorMode::Single, rng::derive(cfg.seed, 0x7a2))
        },
    )?;
    let params = state.best.as_ref().map_or(&state.params, |(_, p)| p).clone();
    Ok((ScoreModel::from_params(arch, params)?, state))
}
