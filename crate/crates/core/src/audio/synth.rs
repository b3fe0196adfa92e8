//! Deterministic synthetic "speakers" and background noise.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::rng;

/// Peak amplitude of every synthesized source.
pub const SOURCE_PEAK: f64 = 0.7;

/// Tonal fundamentals are drawn on a grid of `sample_rate / TONAL_GRID` Hz.
pub const TONAL_GRID: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Three harmonics of a random fundamental under a slow amplitude envelope.
    Tonal,
    /// Gaussian noise restricted to a random sub-band.
    BandNoise,
    /// Linear frequency sweep.
    Chirp,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::Tonal, SourceKind::BandNoise, SourceKind::Chirp];
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::Tonal => "tonal",
            SourceKind::BandNoise => "band_noise",
            SourceKind::Chirp => "chirp",
        })
    }
}

impl FromStr for SourceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tonal" => Ok(SourceKind::Tonal),
            "band_noise" => Ok(SourceKind::BandNoise),
            "chirp" => Ok(SourceKind::Chirp),
            other => Err(Error::Config(format!("unknown source kind `{other}`"))),
        }
    }
}

fn sample_count(duration_s: f64, sample_rate: u32) -> Result<usize> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::Domain(format!("duration {duration_s} s must be positive")));
    }
    if sample_rate == 0 {
        return Err(Error::Domain("sample rate must be positive".into()));
    }
    Ok(((duration_s * f64::from(sample_rate)).round() as usize).max(1))
}

fn peak_normalize(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        let g = peak / m;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

/// Generates one source of the given kind, peak-normalized to [`SOURCE_PEAK`].
pub fn synth_source(kind: SourceKind, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let n = sample_count(duration_s, sample_rate)?;
    let fs = f64::from(sample_rate);
    let mut rng = rng::stream(seed, kind as u64 + 1);
    let raw = match kind {
        SourceKind::Tonal => {
            let df = fs / TONAL_GRID as f64;
            let f0 = (rng.random_range(110.0..300.0) / df).round() * df;
            let mut harmonics: Vec<u32> = (1..=6).collect();
            for i in 0..3 {
                let j = rng.random_range(i..harmonics.len());
                harmonics.swap(i, j);
            }
            let partials: Vec<(f64, f64, f64)> = harmonics[..3]
                .iter()
                .map(|&h| (f64::from(h) * f0, rng.random_range(0.3..1.0), rng.random_range(0.0..2.0 * PI)))
                .collect();
            let depth = rng.random_range(0.1..0.3);
            let rate = rng.random_range(0.5..3.0);
            let env_phase = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let env = 1.0 - depth + depth * (2.0 * PI * rate * t + env_phase).sin();
                    env * partials
                        .iter()
                        .map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                        .sum::<f64>()
                })
                .collect()
        }
        SourceKind::BandNoise => {
            let nyq = fs / 2.0;
            let center = rng.random_range(0.1 * nyq..0.75 * nyq);
            let width = rng.random_range(0.05 * nyq..0.2 * nyq);
            let noise = rng::standard_normal(&mut rng, n);
            band_limit(&noise, fs, (center - width / 2.0).max(20.0), (center + width / 2.0).min(nyq - 20.0))
        }
        SourceKind::Chirp => {
            let nyq = fs / 2.0;
            let f_a = rng.random_range(0.04 * nyq..0.9 * nyq);
            let f_b = rng.random_range(0.04 * nyq..0.9 * nyq);
            let phase0 = rng.random_range(0.0..2.0 * PI);
            let dur = n as f64 / fs;
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    (2.0 * PI * (f_a * t + (f_b - f_a) * t * t / (2.0 * dur)) + phase0).sin()
                })
                .collect()
        }
    };
    Waveform::new(peak_normalize(raw, SOURCE_PEAK), sample_rate)
}

/// Zeroes every DFT bin outside `[lo, hi]` Hz.
fn band_limit(x: &[f64], fs: f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// White Gaussian background noise with unit variance.
pub fn synth_noise(num_samples: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let mut rng = rng::stream(seed, 101);
    Waveform::new(rng::standard_normal(&mut rng, num_samples), sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for kind in SourceKind::ALL {
            let a = synth_source(kind, 0.3, 8000, 11).unwrap();
            let b = synth_source(kind, 0.3, 8000, 11).unwrap();
            let c = synth_source(kind, 0.3, 8000, 12).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
            assert_eq!(a.len(), 2400);
        }
    }

    #[test]
    fn peak_is_normalized() {
        for kind in SourceKind::ALL {
            for seed in 0..5 {
                let w = synth_source(kind, 0.2, 8000, seed).unwrap();
                let peak = w.samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!((peak - SOURCE_PEAK).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tonal_energy_is_concentrated() {
        // Oracle: direct O(n^2) DFT of a 4096-sample tonal source.
        let n = TONAL_GRID;
        for seed in 0..4 {
            let w = synth_source(SourceKind::Tonal, n as f64 / 8000.0, 8000, seed).unwrap();
            assert_eq!(w.len(), n);
            let mut power: Vec<f64> = (0..=n / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (i, x) in w.samples.iter().enumerate() {
                        let a = -2.0 * PI * (k * i % n) as f64 / n as f64;
                        re += x * a.cos();
                        im += x * a.sin();
                    }
                    re * re + im * im
                })
                .collect();
            let total: f64 = power.iter().sum();
            power.sort_by(|a, b| b.total_cmp(a));
            let top: f64 = power[..6].iter().sum();
            assert!(top / total >= 0.9, "seed {seed}: {}", top / total);
        }
    }

    #[test]
    fn band_noise_stays_in_band() {
        let w = synth_source(SourceKind::BandNoise, 0.5, 8000, 3).unwrap();
        assert!(w.samples.iter().all(|v| v.is_finite()));
        let e: f64 = w.samples.iter().map(|v| v * v).sum();
        assert!(e > 0.0);
    }

    #[test]
    fn rejects_bad_duration() {
        assert!(synth_source(SourceKind::Chirp, 0.0, 8000, 1).is_err());
        assert!(synth_source(SourceKind::Chirp, -1.0, 8000, 1).is_err());
        assert_eq!("band_noise".parse::<SourceKind>().unwrap(), SourceKind::BandNoise);
        assert!("speech".parse::<SourceKind>().is_err());
    }
}
