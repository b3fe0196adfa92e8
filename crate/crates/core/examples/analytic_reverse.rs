//! Runs the reverse sampler with the exact score of a known clean signal and
//! shows the mean recovery error shrinking as the step count grows.

use geco::bridge::{mean, BridgeConfig};
use geco::sampler::{reverse_geco, ReverseOptions};

fn main() -> geco::Result<()> {
    let x0: Vec<f64> = (0..32).map(|i| (0.4 * i as f64).sin()).collect();
    let s_hat: Vec<f64> = x0.iter().map(|v| 0.7 * v + 0.2).collect();
    let norm = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    for steps in [1, 5, 10, 20, 40] {
        let b = BridgeConfig { steps, ..BridgeConfig::default() };
        let score = |x: &[f64], s: &[f64], _y: &[f64], t: f64| -> Vec<f64> {
            let mu = mean(&x0, s, t).expect("equal lengths");
            let var = b.sigma(t).expect("t in range").powi(2);
            x.iter().zip(&mu).map(|(a, m)| -(a - m) / var).collect()
        };
        let runs = 200;
        let mut avg = vec![0.0; x0.len()];
        for r in 0..runs {
            let (out, _) = reverse_geco(&s_hat, &s_hat, &score, &b, r, ReverseOptions::default())?;
            avg.iter_mut().zip(&out).for_each(|(a, o)| *a += o / runs as f64);
        }
        let bias = avg.iter().zip(&x0).map(|(a, x)| (a - x).powi(2)).sum::<f64>().sqrt() / norm;
        println!("M = {steps:>2}: relative bias {bias:.4}");
    }
    Ok(())
}
