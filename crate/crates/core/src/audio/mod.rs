//! Waveforms, WAV I/O, synthetic sources and the noisy-mixture protocol.

mod spectrogram;
mod synth;
mod wav;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use spectrogram::{spectrogram, spectrogram_export, Spectrogram, LOG_FLOOR_DB, SPEC_FRAME, SPEC_HOP};
pub use synth::{synth_noise, synth_source, SourceKind, SOURCE_PEAK, TONAL_GRID};
pub use wav::{decode_wav, dequantize, encode_wav, quantize, read_wav, write_wav};

/// Number of sources per mixture in this release.
pub const NUM_SOURCES: usize = 2;

/// A finite, non-empty sample sequence at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("waveform sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / f64::from(self.sample_rate)
    }

    fn truncated(&self, n: usize) -> Waveform {
        Waveform {
            samples: self.samples[..n].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// One training or evaluation item: `mixture = noise + Σ sources`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub noise: Waveform,
    pub snr_db: f64,
    pub id: String,
}

impl MixtureExample {
    pub fn num_samples(&self) -> usize {
        self.mixture.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.mixture.sample_rate
    }

    /// Elementwise sum of the sources.
    pub fn speech(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.num_samples()];
        for s in &self.sources {
            acc.iter_mut().zip(&s.samples).for_each(|(a, v)| *a += v);
        }
        acc
    }

    /// `10 log10(P_speech / P_noise)` measured on the stored signals.
    pub fn achieved_snr_db(&self) -> f64 {
        10.0 * (mean_power(&self.speech()) / mean_power(&self.noise.samples)).log10()
    }

    /// Largest absolute value of `mixture - noise - Σ sources`.
    pub fn reconstruction_error(&self) -> f64 {
        self.speech()
            .iter()
            .zip(&self.noise.samples)
            .zip(&self.mixture.samples)
            .map(|((s, n), y)| (y - n - s).abs())
            .fold(0.0, f64::max)
    }

    /// Scales every component by one common gain so that no signal peaks
    /// above `peak`. SNR and relative levels are unchanged. Returns the gain.
    pub fn fit_peak(&mut self, peak: f64) -> f64 {
        let top = self
            .sources
            .iter()
            .chain([&self.noise, &self.mixture])
            .flat_map(|w| w.samples.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if top <= peak {
            return 1.0;
        }
        let g = peak / top;
        for w in self.sources.iter_mut().chain([&mut self.noise, &mut self.mixture]) {
            w.samples.iter_mut().for_each(|v| *v *= g);
        }
        g
    }

    /// Checks shared length and rate, source count and reconstruction.
    pub fn validate(&self) -> Result<()> {
        if self.sources.len() != NUM_SOURCES {
            return Err(Error::Shape(format!(
                "{}: {} sources, expected {NUM_SOURCES}",
                self.id,
                self.sources.len()
            )));
        }
        let n = self.num_samples();
        let sr = self.sample_rate();
        for w in self.sources.iter().chain([&self.noise]) {
            if w.len() != n || w.sample_rate != sr {
                return Err(Error::Shape(format!(
                    "{}: component of length {} at {} Hz vs mixture {n} at {sr} Hz",
                    self.id,
                    w.len(),
                    w.sample_rate
                )));
            }
        }
        let err = self.reconstruction_error();
        if err > 1e-6 {
            return Err(Error::Numeric(format!("{}: mixture reconstruction error {err:e}", self.id)));
        }
        Ok(())
    }
}

/// Mixes sources with noise rescaled to `snr_db` against the summed speech.
///
/// All signals are first truncated to the shortest source; the sources keep
/// their relative levels.
pub fn mix(sources: &[Waveform], noise: &Waveform, snr_db: f64) -> Result<MixtureExample> {
    if sources.len() != NUM_SOURCES {
        return Err(Error::Shape(format!("mix: {} sources, expected {NUM_SOURCES}", sources.len())));
    }
    if !snr_db.is_finite() {
        return Err(Error::Domain(format!("mix: snr {snr_db} dB is not finite")));
    }
    let sr = noise.sample_rate;
    if let Some(s) = sources.iter().find(|s| s.sample_rate != sr) {
        return Err(Error::Shape(format!("mix: source at {} Hz, noise at {sr} Hz", s.sample_rate)));
    }
    let shortest = sources.iter().map(Waveform::len).min().unwrap_or(0);
    let longest = sources.iter().map(Waveform::len).max().unwrap_or(0);
    if noise.len() < longest {
        return Err(Error::Shape(format!(
            "mix: noise has {} samples, longest source {longest}",
            noise.len()
        )));
    }
    let sources: Vec<Waveform> = sources.iter().map(|s| s.truncated(shortest)).collect();
    let raw_noise = noise.truncated(shortest);

    let mut speech = vec![0.0; shortest];
    for s in &sources {
        speech.iter_mut().zip(&s.samples).for_each(|(a, v)| *a += v);
    }
    let p_speech = mean_power(&speech);
    let p_noise = mean_power(&raw_noise.samples);
    if p_speech == 0.0 {
        return Err(Error::Degenerate("mix: sources have zero power".into()));
    }
    if p_noise == 0.0 {
        return Err(Error::Degenerate("mix: noise has zero power".into()));
    }
    let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let noise_samples: Vec<f64> = raw_noise.samples.iter().map(|v| v * gain).collect();
    let mixture: Vec<f64> = speech.iter().zip(&noise_samples).map(|(s, n)| s + n).collect();
    Ok(MixtureExample {
        mixture: Waveform::new(mixture, sr)?,
        sources,
        noise: Waveform::new(noise_samples, sr)?,
        snr_db,
        id: String::from("mix"),
    })
}

/// Parameters of the synthetic mixture protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub sample_rate: u32,
    /// Source durations are drawn uniformly from `[min_duration, max_duration]` seconds.
    pub min_duration: f64,
    pub max_duration: f64,
    pub snr_low: f64,
    pub snr_high: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            min_duration: 0.25,
            max_duration: 0.5,
            snr_low: -6.0,
            snr_high: 3.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("dataset: sample_rate must be positive".into()));
        }
        if !(self.min_duration > 0.0 && self.min_duration <= self.max_duration) {
            return Err(Error::Config(format!(
                "dataset: need 0 < min_duration ({}) <= max_duration ({})",
                self.min_duration, self.max_duration
            )));
        }
        if !(self.snr_low.is_finite() && self.snr_high.is_finite() && self.snr_low <= self.snr_high) {
            return Err(Error::Config(format!(
                "dataset: need snr_low ({}) <= snr_high ({})",
                self.snr_low, self.snr_high
            )));
        }
        Ok(())
    }
}

/// Builds example `index` of the dataset seeded by `seed`.
pub fn build_example(index: usize, cfg: &DatasetConfig, seed: u64) -> Result<MixtureExample> {
    let ex_seed = rng::derive(seed, index as u64);
    let mut r = rng::stream(ex_seed, 0);
    let first = r.random_range(0..SourceKind::ALL.len());
    let second = (first + r.random_range(1..SourceKind::ALL.len())) % SourceKind::ALL.len();
    let mut sources = Vec::with_capacity(NUM_SOURCES);
    for (k, kind_idx) in [first, second].into_iter().enumerate() {
        let dur = if cfg.max_duration > cfg.min_duration {
            r.random_range(cfg.min_duration..=cfg.max_duration)
        } else {
            cfg.min_duration
        };
        let s = synth_source(SourceKind::ALL[kind_idx], dur, cfg.sample_rate, rng::derive(ex_seed, k as u64 + 1))?;
        sources.push(s);
    }
    let snr_db = if cfg.snr_high > cfg.snr_low {
        r.random_range(cfg.snr_low..=cfg.snr_high)
    } else {
        cfg.snr_low
    };
    let longest = sources.iter().map(Waveform::len).max().unwrap_or(1);
    let noise = synth_noise(longest, cfg.sample_rate, rng::derive(ex_seed, 99))?;
    let mut ex = mix(&sources, &noise, snr_db)?;
    ex.id = format!("s{seed}-{index:05}");
    Ok(ex)
}

/// Builds `n` examples. Example `i` depends only on `(seed, i)`.
pub fn build_dataset(n: usize, cfg: &DatasetConfig, seed: u64) -> Result<Vec<MixtureExample>> {
    if n == 0 {
        return Err(Error::Domain("build_dataset: need at least one example".into()));
    }
    cfg.validate()?;
    (0..n).map(|i| build_example(i, cfg, seed)).collect()
}
