//! Log-magnitude STFT export for external plotting.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const SPEC_FRAME: usize = 256;
pub const SPEC_HOP: usize = 64;
/// Magnitudes below `1e-10` are reported as this value (dB).
pub const LOG_FLOOR_DB: f64 = -200.0;

/// Log-magnitude spectrogram, `values[bin][frame]` in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn frames(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# bins={} frames={} sample_rate={} frame={SPEC_FRAME} hop={SPEC_HOP}\n",
            self.bins(),
            self.frames(),
            self.sample_rate
        );
        for row in &self.values {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Hann-windowed STFT (frame 256, hop 64), one row per frequency bin.
pub fn spectrogram(w: &Waveform) -> Result<Spectrogram> {
    let n = w.len();
    if n < SPEC_FRAME {
        return Err(Error::Shape(format!("spectrogram: {n} samples, need at least {SPEC_FRAME}")));
    }
    let frames = (n - SPEC_FRAME) / SPEC_HOP + 1;
    let bins = SPEC_FRAME / 2 + 1;
    let window: Vec<f64> = (0..SPEC_FRAME)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / SPEC_FRAME as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(SPEC_FRAME);
    let mut values = vec![vec![0.0; frames]; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); SPEC_FRAME];
    for f in 0..frames {
        let start = f * SPEC_HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, row) in values.iter_mut().enumerate() {
            let mag = buf[k].norm();
            row[f] = if mag > 1e-10 { 20.0 * mag.log10() } else { LOG_FLOOR_DB };
        }
    }
    Ok(Spectrogram {
        values,
        sample_rate: w.sample_rate,
    })
}

/// Writes the spectrogram of `w` to `path` as CSV with a `#` header line.
pub fn spectrogram_export(w: &Waveform, path: impl AsRef<Path>) -> Result<Spectrogram> {
    let spec = spectrogram(w)?;
    write_atomic(path.as_ref(), spec.to_csv().as_bytes())?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count() {
        for n in [256, 300, 1000, 8000] {
            let w = Waveform::new(vec![0.0; n], 8000).unwrap();
            assert_eq!(spectrogram(&w).unwrap().frames(), (n - 256) / 64 + 1);
        }
        assert!(spectrogram(&Waveform::new(vec![0.0; 100], 8000).unwrap()).is_err());
    }

    #[test]
    fn silence_is_floor() {
        let w = Waveform::new(vec![0.0; 1000], 8000).unwrap();
        let s = spectrogram(&w).unwrap();
        assert_eq!(s.bins(), 129);
        assert!(s.values.iter().flatten().all(|&v| v == LOG_FLOOR_DB));
    }

    #[test]
    fn tone_has_one_dominant_row() {
        // 1000 Hz at 8 kHz falls on bin 1000 / (8000/256) = 32.
        let w = Waveform::new(
            (0..4000).map(|i| (2.0 * PI * 1000.0 * i as f64 / 8000.0).sin()).collect(),
            8000,
        )
        .unwrap();
        let s = spectrogram(&w).unwrap();
        for f in 0..s.frames() {
            let best = (0..s.bins()).max_by(|&a, &b| s.values[a][f].total_cmp(&s.values[b][f])).unwrap();
            assert_eq!(best, 32);
        }
    }

    #[test]
    fn csv_layout() {
        let w = Waveform::new(vec![0.1; 512], 8000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = spectrogram_export(&w, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# bins=129 frames=5"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), s.bins());
        assert_eq!(rows[0].split(',').count(), s.frames());
    }
}
