//! RIFF/WAVE reader and writer, PCM 16-bit mono only.
//!
//! Samples map to `[-1, 1)` as `q / 32768`; writing rounds to the nearest
//! code and saturates, so `+1.0` is stored as 32767.

use std::fs;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

const PCM: u16 = 1;
const HEADER_LEN: usize = 44;

pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn dequantize(q: i16) -> f64 {
    f64::from(q) / 32768.0
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

struct Format {
    sample_rate: u32,
}

fn parse_fmt(bytes: &[u8], off: usize, size: usize) -> Result<Format> {
    if size < 16 {
        return Err(Error::format(off as u64, format!("fmt chunk too short ({size} bytes)")));
    }
    let tag = u16_at(bytes, off);
    if tag != PCM {
        return Err(Error::format(off as u64, format!("unsupported encoding tag {tag:#06x}, need PCM (1)")));
    }
    let channels = u16_at(bytes, off + 2);
    if channels != 1 {
        return Err(Error::format(off as u64 + 2, format!("{channels} channels, only mono is supported")));
    }
    let sample_rate = u32_at(bytes, off + 4);
    if sample_rate == 0 {
        return Err(Error::format(off as u64 + 4, "sample rate is zero"));
    }
    let block_align = u16_at(bytes, off + 12);
    let bits = u16_at(bytes, off + 14);
    if bits != 16 {
        return Err(Error::format(off as u64 + 14, format!("{bits}-bit samples, only 16-bit is supported")));
    }
    if block_align != 2 {
        return Err(Error::format(off as u64 + 12, format!("block align {block_align}, expected 2")));
    }
    Ok(Format { sample_rate })
}

/// Parses a complete WAV file image.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "file shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::format(0, "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::format(8, "missing WAVE tag"));
    }
    let mut fmt: Option<Format> = None;
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(bytes, off + 4) as usize;
        let body = off + 8;
        let Some(end) = body.checked_add(size).filter(|&e| e <= bytes.len()) else {
            return Err(Error::format(
                off as u64 + 4,
                format!("chunk size {size} runs past end of file ({} bytes)", bytes.len()),
            ));
        };
        match id {
            b"fmt " => fmt = Some(parse_fmt(bytes, body, size)?),
            b"data" => {
                let Some(f) = fmt.as_ref() else {
                    return Err(Error::format(off as u64, "data chunk before fmt chunk"));
                };
                if !size.is_multiple_of(2) {
                    return Err(Error::format(off as u64 + 4, format!("data size {size} is not a whole number of samples")));
                }
                if size == 0 {
                    return Err(Error::format(off as u64 + 4, "data chunk is empty"));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| dequantize(i16::from_le_bytes([c[0], c[1]])))
                    .collect();
                return Waveform::new(samples, f.sample_rate);
            }
            _ => {}
        }
        off = end + (size & 1);
    }
    Err(Error::format(off as u64, "no data chunk"))
}

/// Serializes a waveform as a 44-byte-header PCM16 mono WAV image.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(HEADER_LEN + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    decode_wav(&fs::read(path)?)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    write_atomic(path.as_ref(), &encode_wav(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_sample_round_trip() {
        let w = Waveform::new(vec![0.0], 8000).unwrap();
        let r = decode_wav(&encode_wav(&w)).unwrap();
        assert_eq!(r.samples, vec![0.0]);
        assert_eq!(r.sample_rate, 8000);
    }

    #[test]
    fn full_scale_saturates() {
        let w = Waveform::new(vec![1.0, -1.0], 16000).unwrap();
        let r = decode_wav(&encode_wav(&w)).unwrap();
        assert_eq!(r.samples, vec![32767.0 / 32768.0, -1.0]);
    }

    fn header_with(patch: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
        let w = Waveform::new(vec![0.1, 0.2], 8000).unwrap();
        let mut b = encode_wav(&w);
        patch(&mut b);
        b
    }

    fn offset_of(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        assert_eq!(offset_of(decode_wav(b"RIFF").unwrap_err()), 4);
        assert_eq!(offset_of(decode_wav(&header_with(|b| b[0] = b'X')).unwrap_err()), 0);
        assert_eq!(offset_of(decode_wav(&header_with(|b| b[8] = b'X')).unwrap_err()), 8);
        // stereo
        assert_eq!(offset_of(decode_wav(&header_with(|b| b[22] = 2)).unwrap_err()), 22);
        // IEEE float tag
        assert_eq!(offset_of(decode_wav(&header_with(|b| b[20] = 3)).unwrap_err()), 20);
        // 8-bit
        assert_eq!(offset_of(decode_wav(&header_with(|b| b[34] = 8)).unwrap_err()), 34);
        // truncated data chunk
        let mut short = header_with(|_| {});
        short.truncate(46);
        assert_eq!(offset_of(decode_wav(&short).unwrap_err()), 40);
    }

    #[test]
    fn skips_unknown_chunks() {
        let w = Waveform::new(vec![0.25, -0.5, 0.125], 8000).unwrap();
        let plain = encode_wav(&w);
        let mut b = plain[..36].to_vec();
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(&plain[36..]);
        assert_eq!(decode_wav(&b).unwrap(), w);
    }

    proptest! {
        #[test]
        fn round_trip_within_one_lsb(seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, 0);
            let samples: Vec<f64> = (0..8000).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let w = Waveform::new(samples, 8000).unwrap();
            let r = decode_wav(&encode_wav(&w)).unwrap();
            prop_assert_eq!(r.sample_rate, 8000);
            for (a, b) in w.samples.iter().zip(&r.samples) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }
}
