//! End-to-end inference: separator, optional corrector, evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::MixtureExample;
use crate::bridge::BridgeConfig;
use crate::error::{Error, Result};
use crate::metrics::{pit_assign, si_snr};
use crate::models::{ScoreModel, SeparatorModel};
use crate::rng;
use crate::sampler::{one_step_fastgeco, reverse_geco, ReverseOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Separator output as is.
    SepOnly,
    /// `M`-step reverse diffusion with the score-matching model.
    Geco,
    /// One reverse step with the fine-tuned model.
    Fastgeco,
    /// One reverse step with the score-matching model, not fine-tuned.
    GecoOneStep,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SepOnly, Mode::Geco, Mode::Fastgeco, Mode::GecoOneStep];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SepOnly => "sep_only",
            Mode::Geco => "geco",
            Mode::Fastgeco => "fastgeco",
            Mode::GecoOneStep => "geco_one_step",
        }
    }

    /// Score evaluations per speaker.
    pub fn score_calls(self, bridge: &BridgeConfig) -> usize {
        match self {
            Mode::SepOnly => 0,
            Mode::Geco => bridge.steps,
            Mode::Fastgeco | Mode::GecoOneStep => 1,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected sep_only, geco, fastgeco or geco_one_step)")))
    }
}

/// Models and settings needed to run one [`Mode`].
pub struct Separation<'a> {
    pub mode: Mode,
    pub separator: &'a SeparatorModel,
    /// Score model for the corrector modes.
    pub score: Option<&'a ScoreModel>,
    pub bridge: BridgeConfig,
    pub reverse: ReverseOptions,
}

impl Separation<'_> {
    /// Corrects a single separator estimate.
    pub fn correct(&self, s_hat: &[f64], mixture: &[f64], seed: u64) -> Result<Vec<f64>> {
        let need_score = || {
            self.score
                .ok_or_else(|| Error::Config(format!("mode {} needs a score model", self.mode)))
        };
        match self.mode {
            Mode::SepOnly => Ok(s_hat.to_vec()),
            Mode::Geco => Ok(reverse_geco(s_hat, mixture, need_score()?, &self.bridge, seed, self.reverse)?.0),
            Mode::Fastgeco | Mode::GecoOneStep => {
                one_step_fastgeco(s_hat, mixture, need_score()?, &self.bridge, seed, self.reverse)
            }
        }
    }

    /// Separates `mixture` into one signal per source. Speaker `k` is
    /// corrected with seed stream `k` of `seed`.
    pub fn run(&self, mixture: &[f64], seed: u64) -> Result<Vec<Vec<f64>>> {
        let estimates = self.separator.forward(mixture)?;
        estimates
            .iter()
            .enumerate()
            .map(|(k, s)| self.correct(s, mixture, rng::derive(seed, k as u64)))
            .collect()
    }
}

/// Per-source evaluation of one example.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub source: usize,
    pub snr_db: f64,
    pub si_snr: f64,
    pub si_snr_mixture: f64,
    pub si_snri: f64,
}

/// Scores estimates against references after uPIT assignment.
/// `estimator(i, example)` returns the unordered estimates for example `i`.
pub fn eval_rows<F>(examples: &[MixtureExample], mut estimator: F) -> Result<Vec<EvalRow>>
where
    F: FnMut(usize, &MixtureExample) -> Result<Vec<Vec<f64>>>,
{
    let mut rows = Vec::with_capacity(examples.len() * 2);
    for (i, ex) in examples.iter().enumerate() {
        let est = estimator(i, ex)?;
        let refs: Vec<&[f64]> = ex.sources.iter().map(|s| s.samples.as_slice()).collect();
        let pit = pit_assign(&est, &refs)?;
        for (k, r) in refs.iter().enumerate() {
            let mix = si_snr(&ex.mixture.samples, r)?;
            let v = pit.per_source_sisnr[k];
            rows.push(EvalRow {
                id: ex.id.clone(),
                source: k,
                snr_db: ex.snr_db,
                si_snr: v,
                si_snr_mixture: mix,
                si_snri: v - mix,
            });
        }
    }
    Ok(rows)
}

/// Evaluates `sep` on every example; example `i` uses seed stream `i`.
/// Examples are spread over all available cores; the result does not depend
/// on the thread count.
pub fn evaluate(sep: &Separation<'_>, examples: &[MixtureExample], seed: u64) -> Result<Vec<EvalRow>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    evaluate_with_threads(sep, examples, seed, threads)
}

pub fn evaluate_with_threads(
    sep: &Separation<'_>,
    examples: &[MixtureExample],
    seed: u64,
    threads: usize,
) -> Result<Vec<EvalRow>> {
    let run = |i: usize, ex: &MixtureExample| sep.run(&ex.mixture.samples, rng::derive(seed, i as u64));
    let threads = threads.clamp(1, examples.len().max(1));
    if threads == 1 {
        return eval_rows(examples, run);
    }
    let chunk = examples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Vec<Vec<f64>>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let run = &run;
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, ex)| run(c * chunk + j, ex))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut estimates = Vec::with_capacity(examples.len());
    for p in parts {
        estimates.extend(p?);
    }
    let mut it = estimates.into_iter();
    eval_rows(examples, |_, _| Ok(it.next().expect("one estimate per example")))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{build_dataset, DatasetConfig};
    use crate::metrics::SI_SNR_CAP_DB;
    use crate::models::{ScoreArch, SeparatorArch};
    use crate::sampler::CountingScore;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!(matches!("fast".parse::<Mode>(), Err(Error::Config(_))));
    }

    #[test]
    fn injected_references_score_the_cap() {
        let data = build_dataset(3, &DatasetConfig::default(), 1).unwrap();
        let rows = eval_rows(&data, |_, ex| Ok(ex.sources.iter().rev().map(|s| s.samples.clone()).collect())).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            let ex = data.iter().find(|e| e.id == r.id).unwrap();
            let want = SI_SNR_CAP_DB - si_snr(&ex.mixture.samples, &ex.sources[r.source].samples).unwrap();
            assert!((r.si_snri - want).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn modes_call_the_score_the_expected_number_of_times() {
        let data = build_dataset(1, &DatasetConfig::default(), 2).unwrap();
        let sep = SeparatorModel::init(SeparatorArch::default(), 0);
        let score = ScoreModel::init(ScoreArch::default(), 0);
        let bridge = BridgeConfig::default();
        for mode in Mode::ALL {
            let s = Separation {
                mode,
                separator: &sep,
                score: Some(&score),
                bridge,
                reverse: ReverseOptions::default(),
            };
            let est = sep.forward(&data[0].mixture.samples).unwrap();
            let counter = CountingScore::new(&score);
            let y = &data[0].mixture.samples;
            match mode {
                Mode::SepOnly => {}
                Mode::Geco => {
                    reverse_geco(&est[0], y, &counter, &bridge, 0, ReverseOptions::default()).unwrap();
                }
                _ => {
                    one_step_fastgeco(&est[0], y, &counter, &bridge, 0, ReverseOptions::default()).unwrap();
                }
            }
            assert_eq!(counter.calls(), mode.score_calls(&bridge));
            let out = s.run(y, 3).unwrap();
            assert_eq!(out.len(), 2);
            assert!(out.iter().all(|o| o.len() == y.len()));
            assert_eq!(out, s.run(y, 3).unwrap());
        }
        let data = build_dataset(5, &DatasetConfig::default(), 4).unwrap();
        let s = Separation {
            mode: Mode::Geco,
            separator: &sep,
            score: Some(&score),
            bridge: BridgeConfig { steps: 3, ..bridge },
            reverse: ReverseOptions::default(),
        };
        let serial = evaluate_with_threads(&s, &data, 9, 1).unwrap();
        assert_eq!(evaluate_with_threads(&s, &data, 9, 3).unwrap(), serial);
        assert_eq!(evaluate_with_threads(&s, &data, 9, 8).unwrap(), serial);

        let missing = Separation {
            mode: Mode::Geco,
            separator: &sep,
            score: None,
            bridge,
            reverse: ReverseOptions::default(),
        };
        assert!(matches!(missing.run(&data[0].mixture.samples, 0), Err(Error::Config(_))));
    }
}
