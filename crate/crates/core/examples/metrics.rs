//! SI-SNR, its improvement over the mixture, and permutation-invariant pairing.

use geco::metrics::{pit_assign, si_snr, si_snr_improvement};

fn main() -> geco::Result<()> {
    let s = [1.0, -1.0, 1.0, -1.0];
    println!("SI-SNR([1,-1,1,0] vs s) = {:.3} dB", si_snr(&[1.0, -1.0, 1.0, 0.0], &s)?);

    let n = 400;
    let a: Vec<f64> = (0..n).map(|i| (0.05 * i as f64).sin()).collect();
    let b: Vec<f64> = (0..n).map(|i| (0.31 * i as f64).sin().signum() * 0.5).collect();
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    // Estimates in swapped order with some leakage.
    let est = vec![
        b.iter().zip(&a).map(|(y, x)| y + 0.1 * x).collect::<Vec<_>>(),
        a.iter().zip(&b).map(|(x, y)| x + 0.2 * y).collect::<Vec<_>>(),
    ];
    let pit = pit_assign(&est, &[a.clone(), b.clone()])?;
    println!("best permutation {:?}, per-source SI-SNR {:?}", pit.permutation, pit.per_source_sisnr);
    for (k, r) in [&a, &b].into_iter().enumerate() {
        let i = si_snr_improvement(&est[pit.permutation[k]], r, &mix)?;
        println!("source {k}: SI-SNRi {i:.2} dB");
    }
    Ok(())
}
