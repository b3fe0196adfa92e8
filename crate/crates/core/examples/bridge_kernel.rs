//! Tabulates the bridge schedule and draws from its perturbation kernel.

use geco::bridge::{mean, sample_kernel, BridgeConfig};
use geco::specfun::expint_ei;

fn main() -> geco::Result<()> {
    let b = BridgeConfig::default();
    println!("c = {}, v = {}, T' = {}, M = {}", b.c, b.v, b.t_prime, b.steps);
    println!("{:>6} {:>10} {:>10}", "t", "g(t)", "sigma(t)");
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        println!("{t:>6.2} {:>10.5} {:>10.5}", b.diffusion(t), b.sigma(t)?);
    }
    println!("Ei(-2 ln v) = {:.12}", expint_ei(-2.0 * b.v.ln())?);

    let x0 = [1.0, -1.0, 0.5];
    let s_hat = [0.8, -0.6, 0.0];
    let k = sample_kernel(&x0, &s_hat, b.t_prime, &b, 42)?;
    println!("mean at T' = {:?}", mean(&x0, &s_hat, b.t_prime)?);
    println!("draw  at T' = {:?} (sigma {:.4})", k.x_t, k.sigma_t);
    Ok(())
}
