//! Log-magnitude spectrogram of a synthetic chirp, summarized per frame.

use geco::audio::{spectrogram, synth_source, SourceKind};

fn main() -> geco::Result<()> {
    let w = synth_source(SourceKind::Chirp, 0.5, 8000, 3)?;
    let s = spectrogram(&w)?;
    println!("{} bins x {} frames", s.bins(), s.frames());
    for f in (0..s.frames()).step_by(8) {
        let (bin, db) = (0..s.bins())
            .map(|b| (b, s.values[b][f]))
            .fold((0, f64::NEG_INFINITY), |a, c| if c.1 > a.1 { c } else { a });
        let hz = bin as f64 * w.sample_rate as f64 / (2.0 * (s.bins() - 1) as f64);
        println!("frame {f:>3}: peak {hz:>7.1} Hz at {db:.1} dB");
    }
    Ok(())
}
