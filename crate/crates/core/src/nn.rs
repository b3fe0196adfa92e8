//! Minimal frame-wise layers with explicit reverse passes.
//!
//! Activations are `frames × channels` matrices. Parameters live in one
//! flat `Vec<f64>` per model; every layer records the offset of its block
//! so the gradient buffer mirrors the parameter vector exactly.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Hands out consecutive parameter ranges.
#[derive(Debug, Default)]
pub(crate) struct Layout {
    next: usize,
}

impl Layout {
    fn take(&mut self, n: usize) -> usize {
        let off = self.next;
        self.next += n;
        off
    }

    pub fn len(&self) -> usize {
        self.next
    }
}

fn view2(p: &[f64], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &p[off..off + rows * cols]).expect("layout")
}

fn view2_mut(p: &mut [f64], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut p[off..off + rows * cols]).expect("layout")
}

fn view1(p: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[off..off + n])
}

fn view1_mut(p: &mut [f64], off: usize, n: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut p[off..off + n])
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, out: &mut [f64]) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    out.iter_mut().for_each(|w| *w = rng.random_range(-a..=a));
}

/// `y = x Wᵀ + b` applied to every frame.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    off: usize,
    pub inp: usize,
    pub out: usize,
    bias: bool,
}

impl Dense {
    pub fn new(layout: &mut Layout, inp: usize, out: usize, bias: bool) -> Self {
        let off = layout.take(inp * out + if bias { out } else { 0 });
        Self { off, inp, out, bias }
    }

    fn bias_off(&self) -> usize {
        self.off + self.inp * self.out
    }

    pub fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng) {
        glorot(rng, self.inp, self.out, &mut p[self.off..self.off + self.inp * self.out]);
        if self.bias {
            p[self.bias_off()..self.bias_off() + self.out].fill(0.0);
        }
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        let w = view2(p, self.off, self.out, self.inp);
        let mut y = x.dot(&w.t());
        if self.bias {
            y += &view1(p, self.bias_off(), self.out);
        }
        y
    }

    /// Accumulates parameter gradients and returns `∂L/∂x` when `want_dx`.
    pub fn backward(
        &self,
        p: &[f64],
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        g: &mut [f64],
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        {
            let mut gw = view2_mut(g, self.off, self.out, self.inp);
            general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut gw);
        }
        if self.bias {
            let mut gb = view1_mut(g, self.bias_off(), self.out);
            gb += &dy.sum_axis(Axis(0));
        }
        want_dx.then(|| dy.dot(&view2(p, self.off, self.out, self.inp)))
    }
}

/// Per-channel convolution across frames, kernel 3, zero padding.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DepthwiseConv3 {
    off: usize,
    ch: usize,
}

impl DepthwiseConv3 {
    pub fn new(layout: &mut Layout, ch: usize) -> Self {
        Self {
            off: layout.take(ch * 3 + ch),
            ch,
        }
    }

    pub fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng) {
        glorot(rng, 3, 3, &mut p[self.off..self.off + 3 * self.ch]);
        p[self.off + 3 * self.ch..self.off + 4 * self.ch].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        let w = view2(p, self.off, self.ch, 3);
        let b = view1(p, self.off + 3 * self.ch, self.ch);
        let frames = x.nrows();
        let mut y = Array2::zeros((frames, self.ch));
        y += &b;
        for f in 0..frames {
            for j in 0..3 {
                let src = f as isize + j as isize - 1;
                if src < 0 || src >= frames as isize {
                    continue;
                }
                let mut row = y.row_mut(f);
                Zip::from(&mut row)
                    .and(x.row(src as usize))
                    .and(w.column(j))
                    .for_each(|o, &xi, &wi| *o += wi * xi);
            }
        }
        y
    }

    pub fn backward(
        &self,
        p: &[f64],
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        g: &mut [f64],
    ) -> Array2<f64> {
        let w = view2(p, self.off, self.ch, 3);
        let frames = x.nrows();
        let mut dx = Array2::zeros((frames, self.ch));
        {
            let mut gw = view2_mut(g, self.off, self.ch, 3);
            for f in 0..frames {
                for j in 0..3 {
                    let src = f as isize + j as isize - 1;
                    if src < 0 || src >= frames as isize {
                        continue;
                    }
                    let src = src as usize;
                    Zip::from(gw.column_mut(j))
                        .and(dy.row(f))
                        .and(x.row(src))
                        .for_each(|gwi, &d, &xi| *gwi += d * xi);
                    Zip::from(dx.row_mut(src))
                        .and(dy.row(f))
                        .and(w.column(j))
                        .for_each(|dxi, &d, &wi| *dxi += d * wi);
                }
            }
        }
        let mut gb = view1_mut(g, self.off + 3 * self.ch, self.ch);
        gb += &dy.sum_axis(Axis(0));
        dx
    }
}

/// Residual block: `h + W_r (tanh(u) ⊙ σ(v))` with `[u | v] = W_g conv(h)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GatedBlock {
    conv: DepthwiseConv3,
    gate: Dense,
    res: Dense,
    ch: usize,
}

pub(crate) struct GatedCache {
    h_in: Array2<f64>,
    conv_out: Array2<f64>,
    a: Array2<f64>,
    s: Array2<f64>,
    r: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GatedBlock {
    pub fn new(layout: &mut Layout, ch: usize) -> Self {
        Self {
            conv: DepthwiseConv3::new(layout, ch),
            gate: Dense::new(layout, ch, 2 * ch, true),
            res: Dense::new(layout, ch, ch, true),
            ch,
        }
    }

    pub fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng) {
        self.conv.init(p, rng);
        self.gate.init(p, rng);
        self.res.init(p, rng);
    }

    pub fn forward(&self, p: &[f64], h: Array2<f64>) -> (Array2<f64>, GatedCache) {
        let conv_out = self.conv.forward(p, h.view());
        let pre = self.gate.forward(p, conv_out.view());
        let a = pre.slice(s![.., ..self.ch]).mapv(f64::tanh);
        let sg = pre.slice(s![.., self.ch..]).mapv(sigmoid);
        let r = &a * &sg;
        let out = &h + &self.res.forward(p, r.view());
        (
            out,
            GatedCache {
                h_in: h,
                conv_out,
                a,
                s: sg,
                r,
            },
        )
    }

    /// Takes `∂L/∂h_out`, returns `∂L/∂h_in`.
    pub fn backward(&self, p: &[f64], c: &GatedCache, dh: Array2<f64>, g: &mut [f64]) -> Array2<f64> {
        let dr = self.res.backward(p, c.r.view(), dh.view(), g, true).expect("dx");
        let frames = dh.nrows();
        let mut dpre = Array2::zeros((frames, 2 * self.ch));
        {
            let (mut du, mut dv) = dpre.multi_slice_mut((s![.., ..self.ch], s![.., self.ch..]));
            Zip::from(&mut du)
                .and(&dr)
                .and(&c.a)
                .and(&c.s)
                .for_each(|o, &d, &a, &sg| *o = d * sg * (1.0 - a * a));
            Zip::from(&mut dv)
                .and(&dr)
                .and(&c.a)
                .and(&c.s)
                .for_each(|o, &d, &a, &sg| *o = d * a * sg * (1.0 - sg));
        }
        let dconv = self.gate.backward(p, c.conv_out.view(), dpre.view(), g, true).expect("dx");
        let dh_branch = self.conv.backward(p, c.h_in.view(), dconv.view(), g);
        dh + dh_branch
    }
}

/// Splits a signal into `frame`-sample rows, zero-padding the tail.
pub(crate) fn to_frames(x: &[f64], frame: usize) -> Array2<f64> {
    let frames = x.len().div_ceil(frame);
    let mut m = Array2::zeros((frames, frame));
    for (i, v) in x.iter().enumerate() {
        m[[i / frame, i % frame]] = *v;
    }
    m
}

/// Inverse of [`to_frames`], truncated to `n` samples.
pub(crate) fn from_frames(m: &Array2<f64>, n: usize) -> Vec<f64> {
    m.iter().take(n).copied().collect()
}

/// Sinusoidal embedding of a diffusion time in `[0, 1]`.
pub(crate) fn time_embedding(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        e[i] = arg.sin();
        e[half + i] = arg.cos();
    }
    e
}
