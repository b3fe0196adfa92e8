//! Builds a few synthetic mixtures, writes them as WAV files and reads one back.
//!
//! Usage: `cargo run --example simulate_dataset -- [out_dir] [count]`

use std::path::PathBuf;

use geco::audio::{build_dataset, read_wav, write_wav, DatasetConfig};

fn main() -> geco::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "simulated".into()));
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    std::fs::create_dir_all(&out)?;
    let cfg = DatasetConfig::default();
    for mut ex in build_dataset(count, &cfg, 7)? {
        ex.fit_peak(0.99);
        println!(
            "{}: {} samples, SNR {:+.2} dB (achieved {:+.2})",
            ex.id,
            ex.num_samples(),
            ex.snr_db,
            ex.achieved_snr_db()
        );
        write_wav(out.join(format!("{}_mix.wav", ex.id)), &ex.mixture)?;
        for (k, s) in ex.sources.iter().enumerate() {
            write_wav(out.join(format!("{}_s{}.wav", ex.id, k + 1)), s)?;
        }
    }
    let first = std::fs::read_dir(&out)?.filter_map(|e| e.ok()).map(|e| e.path()).find(|p| {
        p.extension().is_some_and(|e| e == "wav")
    });
    if let Some(p) = first {
        let w = read_wav(&p)?;
        println!("read back {}: {} samples at {} Hz", p.display(), w.len(), w.sample_rate);
    }
    Ok(())
}
