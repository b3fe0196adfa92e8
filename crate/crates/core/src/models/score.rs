//! Score network `f(x_t, ŝ, y, t)` over non-overlapping frames of the three
//! conditioning signals.
//!
//! The frame stack is projected to the hidden width, a projected sinusoidal
//! time embedding is added, a gated residual stack follows, and a linear
//! head maps back to samples. The head output is multiplied by a learned
//! time-dependent gain `exp(w·φ(t) + b)` and divided by the kernel std
//! `σ(t)` of the bridge the model is trained on, so the network itself
//! predicts unit-scale noise.

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::bridge::BridgeConfig;
use crate::error::{check_len, Error, Result};
use crate::nn::{from_frames, time_embedding, to_frames, Dense, GatedBlock, GatedCache, Layout};
use crate::rng;
use crate::sampler::ScoreFn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreArch {
    /// Samples per frame.
    pub frame: usize,
    /// Conditioning channels: state, separator estimate, mixture.
    pub in_channels: usize,
    pub time_embed_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Bridge diffusion scale used for output scaling.
    pub sigma_c: f64,
    /// Bridge diffusion base used for output scaling.
    pub sigma_v: f64,
}

impl ScoreArch {
    /// Default layout scaled for `bridge`.
    pub fn for_bridge(bridge: &BridgeConfig) -> Self {
        Self {
            sigma_c: bridge.c,
            sigma_v: bridge.v,
            ..Self::default()
        }
    }

    /// Checks the output scaling matches `bridge`.
    pub fn check_bridge(&self, bridge: &BridgeConfig) -> Result<()> {
        if self.sigma_c != bridge.c || self.sigma_v != bridge.v {
            return Err(Error::Config(format!(
                "score model was built for c = {}, v = {} but the bridge has c = {}, v = {}",
                self.sigma_c, self.sigma_v, bridge.c, bridge.v
            )));
        }
        Ok(())
    }

    fn sigma(&self, t: f64) -> Result<f64> {
        BridgeConfig {
            c: self.sigma_c,
            v: self.sigma_v,
            ..BridgeConfig::default()
        }
        .sigma(t)
    }
}

impl Default for ScoreArch {
    fn default() -> Self {
        Self {
            frame: 80,
            in_channels: 3,
            time_embed_dim: 32,
            hidden: 128,
            blocks: 3,
            sigma_c: 0.51,
            sigma_v: 2.6,
        }
    }
}

struct Net {
    input: Dense,
    time: Dense,
    blocks: Vec<GatedBlock>,
    head: Dense,
    gain: Dense,
    len: usize,
}

impl Net {
    fn new(arch: ScoreArch) -> Self {
        let mut l = Layout::default();
        let input = Dense::new(&mut l, arch.in_channels * arch.frame, arch.hidden, true);
        let time = Dense::new(&mut l, arch.time_embed_dim, arch.hidden, true);
        let blocks = (0..arch.blocks).map(|_| GatedBlock::new(&mut l, arch.hidden)).collect();
        let head = Dense::new(&mut l, arch.hidden, arch.frame, true);
        let gain = Dense::new(&mut l, arch.time_embed_dim, 1, true);
        Self {
            input,
            time,
            blocks,
            head,
            gain,
            len: l.len(),
        }
    }
}

pub(crate) struct ScoreCache {
    n: usize,
    stacked: Array2<f64>,
    embed: Array2<f64>,
    blocks: Vec<GatedCache>,
    h_out: Array2<f64>,
    head: Array2<f64>,
    /// `exp(gain) / σ(t)`.
    scale: f64,
}

/// Score model; parameters are a flat vector laid out by the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub arch: ScoreArch,
    pub params: Vec<f64>,
}

impl ScoreModel {
    pub fn param_count(arch: &ScoreArch) -> usize {
        Net::new(*arch).len
    }

    /// Glorot-uniform hidden weights, zero biases, zero output head, unit gain.
    pub fn init(arch: ScoreArch, seed: u64) -> Self {
        let net = Net::new(arch);
        let mut params = vec![0.0; net.len];
        let mut r = rng::stream(seed, 0x5c0);
        net.input.init(&mut params, &mut r);
        net.time.init(&mut params, &mut r);
        for b in &net.blocks {
            b.init(&mut params, &mut r);
        }
        // head and gain start at zero: the initial score is identically 0
        // and the initial gain is 1 for every t
        Self { arch, params }
    }

    pub fn from_params(arch: ScoreArch, params: Vec<f64>) -> Result<Self> {
        check_len("score params", params.len(), Self::param_count(&arch))?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("score params contain non-finite values".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn forward(&self, x_t: &[f64], s_hat: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        score_forward(self.arch, &self.params, x_t, s_hat, y, t).map(|(o, _)| o)
    }
}

impl ScoreFn for ScoreModel {
    fn score(&self, x_t: &[f64], s_hat: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        self.forward(x_t, s_hat, y, t)
    }
}

pub(crate) fn score_forward(
    arch: ScoreArch,
    p: &[f64],
    x_t: &[f64],
    s_hat: &[f64],
    y: &[f64],
    t: f64,
) -> Result<(Vec<f64>, ScoreCache)> {
    let net = Net::new(arch);
    check_len("score params", p.len(), net.len)?;
    check_len("score: x_t vs s_hat", x_t.len(), s_hat.len())?;
    check_len("score: x_t vs y", x_t.len(), y.len())?;
    if x_t.is_empty() {
        return Err(Error::Shape("score: empty input".into()));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("score: t = {t} outside (0, 1)")));
    }
    let n = x_t.len();
    let parts = [to_frames(x_t, arch.frame), to_frames(s_hat, arch.frame), to_frames(y, arch.frame)];
    let stacked = concatenate(Axis(1), &[parts[0].view(), parts[1].view(), parts[2].view()]).expect("frames");
    let embed: Array2<f64> = time_embedding(t, arch.time_embed_dim).insert_axis(Axis(0));
    let temb = net.time.forward(p, embed.view());
    let mut h = net.input.forward(p, stacked.view());
    h += &temb.row(0);
    let mut caches = Vec::with_capacity(net.blocks.len());
    for b in &net.blocks {
        let (next, c) = b.forward(p, h);
        h = next;
        caches.push(c);
    }
    let head = net.head.forward(p, h.view());
    let sigma = arch.sigma(t)?;
    if !(sigma > 0.0) {
        return Err(Error::Numeric(format!("score: kernel std vanishes at t = {t}")));
    }
    let scale = net.gain.forward(p, embed.view())[[0, 0]].exp() / sigma;
    let out: Vec<f64> = from_frames(&head, n).into_iter().map(|v| v * scale).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("score: non-finite output at t = {t}")));
    }
    Ok((
        out,
        ScoreCache {
            n,
            stacked,
            embed,
            blocks: caches,
            h_out: h,
            head,
            scale,
        },
    ))
}

/// Parameter gradient given `∂L/∂score`.
pub(crate) fn score_backward(arch: ScoreArch, p: &[f64], c: &ScoreCache, d_out: &[f64]) -> Vec<f64> {
    let net = Net::new(arch);
    debug_assert_eq!(d_out.len(), c.n);
    let mut g = vec![0.0; net.len];
    let d_scaled = to_frames(d_out, arch.frame);
    let d_log_gain = c.scale * (&d_scaled * &c.head).sum();
    let d_gain = Array2::from_elem((1, 1), d_log_gain);
    let _ = net.gain.backward(p, c.embed.view(), d_gain.view(), &mut g, false);
    let d_head = d_scaled * c.scale;
    let mut dh = net.head.backward(p, c.h_out.view(), d_head.view(), &mut g, true).expect("dx");
    for (b, cache) in net.blocks.iter().zip(&c.blocks).rev() {
        dh = b.backward(p, cache, dh, &mut g);
    }
    let d_temb: Array1<f64> = dh.sum_axis(Axis(0));
    let d_temb = d_temb.insert_axis(Axis(0));
    let _ = net.time.backward(p, c.embed.view(), d_temb.view(), &mut g, false);
    let _ = net.input.backward(p, c.stacked.view(), dh.view(), &mut g, false);
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signals(n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x = (0..n).map(|i| (i as f64 * 0.11).sin()).collect();
        let s = (0..n).map(|i| (i as f64 * 0.13).cos()).collect();
        let y = (0..n).map(|i| (i as f64 * 0.07).sin() * 0.5).collect();
        (x, s, y)
    }

    #[test]
    fn documented_parameter_count() {
        assert_eq!(ScoreModel::param_count(&ScoreArch::default()), 195_569);
    }

    #[test]
    fn zero_head_starts_at_zero() {
        let m = ScoreModel::init(ScoreArch::default(), 1);
        let (x, s, y) = signals(200);
        assert!(m.forward(&x, &s, &y, 0.4).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_time_sensitivity_and_determinism() {
        let mut m = ScoreModel::init(ScoreArch::default(), 1);
        m.params.iter_mut().enumerate().for_each(|(i, p)| *p += 0.01 * (i as f64 * 0.7).sin());
        let (x, s, y) = signals(1000);
        let a = m.forward(&x, &s, &y, 0.2).unwrap();
        let b = m.forward(&x, &s, &y, 0.7).unwrap();
        assert_eq!(a.len(), 1000);
        let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
        assert_eq!(a, m.forward(&x, &s, &y, 0.2).unwrap());
    }

    #[test]
    fn input_errors() {
        let m = ScoreModel::init(ScoreArch::default(), 1);
        let (x, s, y) = signals(100);
        assert!(matches!(m.forward(&x, &s[..50], &y, 0.5), Err(Error::Shape(_))));
        assert!(matches!(m.forward(&x, &s, &y, 1.0), Err(Error::Domain(_))));
        assert!(matches!(m.forward(&x, &s, &y, 0.0), Err(Error::Domain(_))));
    }
}
