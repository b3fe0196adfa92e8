//! Mask-based time-domain separator: learned analysis basis, gated
//! residual mask estimator, learned synthesis basis.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::metrics::{pit_assign, si_snr_with_grad, PitResult};
use crate::nn::{from_frames, to_frames, Dense, GatedBlock, GatedCache, Layout};
use crate::rng;

use super::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatorArch {
    /// Encoder window and stride, in samples.
    pub window: usize,
    /// Number of analysis/synthesis filters.
    pub basis: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Number of output sources.
    pub sources: usize,
}

impl Default for SeparatorArch {
    fn default() -> Self {
        Self {
            window: 80,
            basis: 64,
            hidden: 128,
            blocks: 2,
            sources: 2,
        }
    }
}

struct Net {
    arch: SeparatorArch,
    encoder: Dense,
    input: Dense,
    blocks: Vec<GatedBlock>,
    mask: Dense,
    decoder: Dense,
    len: usize,
}

impl Net {
    fn new(arch: SeparatorArch) -> Self {
        let mut l = Layout::default();
        let encoder = Dense::new(&mut l, arch.window, arch.basis, false);
        let input = Dense::new(&mut l, arch.basis, arch.hidden, true);
        let blocks = (0..arch.blocks).map(|_| GatedBlock::new(&mut l, arch.hidden)).collect();
        let mask = Dense::new(&mut l, arch.hidden, (arch.sources + 1) * arch.basis, true);
        let decoder = Dense::new(&mut l, arch.basis, arch.window, false);
        Self {
            arch,
            encoder,
            input,
            blocks,
            mask,
            decoder,
            len: l.len(),
        }
    }
}

struct Cache {
    n: usize,
    frames: Array2<f64>,
    pre: Array2<f64>,
    enc: Array2<f64>,
    blocks: Vec<GatedCache>,
    h_out: Array2<f64>,
    /// `masks[c]` for the `sources + 1` softmax classes; the last one is
    /// the discarded remainder.
    masks: Vec<Array2<f64>>,
    masked: Vec<Array2<f64>>,
}

/// Discriminative separator `y ↦ (ŝ_1, …, ŝ_K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorModel {
    pub arch: SeparatorArch,
    pub params: Vec<f64>,
}

impl SeparatorModel {
    pub fn param_count(arch: &SeparatorArch) -> usize {
        Net::new(*arch).len
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: SeparatorArch, seed: u64) -> Self {
        let net = Net::new(arch);
        let mut params = vec![0.0; net.len];
        let mut r = rng::stream(seed, 0x5e9);
        net.encoder.init(&mut params, &mut r);
        net.input.init(&mut params, &mut r);
        for b in &net.blocks {
            b.init(&mut params, &mut r);
        }
        net.mask.init(&mut params, &mut r);
        net.decoder.init(&mut params, &mut r);
        Self { arch, params }
    }

    pub fn from_params(arch: SeparatorArch, params: Vec<f64>) -> Result<Self> {
        check_len("separator params", params.len(), Self::param_count(&arch))?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("separator params contain non-finite values".into()));
        }
        Ok(Self { arch, params })
    }

    /// Returns one estimate per source, each as long as `y`.
    pub fn forward(&self, y: &[f64]) -> Result<Vec<Vec<f64>>> {
        let net = Net::new(self.arch);
        Ok(forward(&net, &self.params, y)?.0)
    }

    /// Estimates reordered so that `estimates[k]` pairs with `references[k]`.
    pub fn separate_matched(&self, y: &[f64], references: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, PitResult)> {
        let est = self.forward(y)?;
        let pit = pit_assign(&est, references)?;
        let ordered = pit.permutation.iter().map(|&j| est[j].clone()).collect();
        Ok((ordered, pit))
    }
}

fn forward(net: &Net, p: &[f64], y: &[f64]) -> Result<(Vec<Vec<f64>>, Cache)> {
    let a = net.arch;
    if y.len() < a.window {
        return Err(Error::Shape(format!(
            "separator: input of {} samples is shorter than the {}-sample window",
            y.len(),
            a.window
        )));
    }
    let frames = to_frames(y, a.window);
    let pre = net.encoder.forward(p, frames.view());
    let enc = pre.mapv(|v| v.max(0.0));
    let mut h = net.input.forward(p, enc.view());
    let mut caches = Vec::with_capacity(net.blocks.len());
    for b in &net.blocks {
        let (next, c) = b.forward(p, h);
        h = next;
        caches.push(c);
    }
    let logits = net.mask.forward(p, h.view());
    let classes = a.sources + 1;
    let nf = frames.nrows();
    let mut masks = vec![Array2::zeros((nf, a.basis)); classes];
    for f in 0..nf {
        for j in 0..a.basis {
            let m = (0..classes).map(|c| logits[[f, c * a.basis + j]]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, mask) in masks.iter_mut().enumerate() {
                let e = (logits[[f, c * a.basis + j]] - m).exp();
                mask[[f, j]] = e;
                z += e;
            }
            masks.iter_mut().for_each(|mask| mask[[f, j]] /= z);
        }
    }
    let masked: Vec<Array2<f64>> = masks[..a.sources].iter().map(|m| m * &enc).collect();
    let outputs = masked
        .iter()
        .map(|m| from_frames(&net.decoder.forward(p, m.view()), y.len()))
        .collect();
    Ok((
        outputs,
        Cache {
            n: y.len(),
            frames,
            pre,
            enc,
            blocks: caches,
            h_out: h,
            masks,
            masked,
        },
    ))
}

fn backward(net: &Net, p: &[f64], c: &Cache, d_out: &[Vec<f64>]) -> Vec<f64> {
    let a = net.arch;
    let mut g = vec![0.0; net.len];
    let nf = c.frames.nrows();
    let classes = a.sources + 1;
    let mut denc = Array2::<f64>::zeros((nf, a.basis));
    let mut dmask = vec![Array2::<f64>::zeros((nf, a.basis)); classes];
    for k in 0..a.sources {
        debug_assert_eq!(d_out[k].len(), c.n);
        let dframes = to_frames(&d_out[k], a.window);
        let dmasked = net
            .decoder
            .backward(p, c.masked[k].view(), dframes.view(), &mut g, true)
            .expect("dx");
        dmask[k] = &dmasked * &c.enc;
        denc += &(&dmasked * &c.masks[k]);
    }
    // softmax over classes, per (frame, basis)
    let mut dlogits = Array2::<f64>::zeros((nf, classes * a.basis));
    for f in 0..nf {
        for j in 0..a.basis {
            let dot: f64 = (0..classes).map(|cl| c.masks[cl][[f, j]] * dmask[cl][[f, j]]).sum();
            for cl in 0..classes {
                dlogits[[f, cl * a.basis + j]] = c.masks[cl][[f, j]] * (dmask[cl][[f, j]] - dot);
            }
        }
    }
    let mut dh = net.mask.backward(p, c.h_out.view(), dlogits.view(), &mut g, true).expect("dx");
    for (b, cache) in net.blocks.iter().zip(&c.blocks).rev() {
        dh = b.backward(p, cache, dh, &mut g);
    }
    denc += &net.input.backward(p, c.enc.view(), dh.view(), &mut g, true).expect("dx");
    Zip::from(&mut denc).and(&c.pre).for_each(|d, &pre| {
        if pre <= 0.0 {
            *d = 0.0;
        }
    });
    let _ = net.encoder.backward(p, c.frames.view(), denc.view(), &mut g, false);
    g
}

/// Negated best-permutation SI-SNR of the separator on one mixture.
pub struct PitObjective<'a> {
    pub arch: SeparatorArch,
    pub mixture: &'a [f64],
    pub references: &'a [Vec<f64>],
}

impl PitObjective<'_> {
    fn evaluate(&self, params: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let net = Net::new(self.arch);
        check_len("separator params", params.len(), net.len)?;
        let (est, cache) = forward(&net, params, self.mixture)?;
        let pit = pit_assign(&est, self.references)?;
        let loss = -pit.total;
        if !want_grad {
            return Ok((loss, None));
        }
        let mut d_out = vec![vec![0.0; self.mixture.len()]; self.arch.sources];
        for (k, &j) in pit.permutation.iter().enumerate() {
            let (_, g) = si_snr_with_grad(&est[j], &self.references[k])?;
            d_out[j] = g.into_iter().map(|v| -v).collect();
        }
        Ok((loss, Some(backward(&net, params, &cache, &d_out))))
    }
}

impl Objective for PitObjective<'_> {
    fn loss(&self, params: &[f64]) -> Result<f64> {
        Ok(self.evaluate(params, false)?.0)
    }

    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (l, g) = self.evaluate(params, true)?;
        Ok((l, g.expect("requested")))
    }
}
