//! Parameterised building blocks shared by the generator and discriminator.

use std::f64::consts::FRAC_1_SQRT_2;

use adadiff_tape::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::Resample;

/// Variance scale for layers that start as (almost) the zero map, so that
/// residual branches and the output head are initially inactive.
pub(crate) const NEAR_ZERO: f64 = 1e-10;

/// Registers named parameters with fan-average variance-scaling initialisation.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize, scale: f64) -> ParamId {
        let bound = (3.0 * scale / ((fan_in + fan_out) as f64 / 2.0)).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.store.insert(name, Tensor::from_vec(shape, data))
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.insert(name, Tensor::full(shape, value))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, scale: f64) -> Conv {
        let rf = k * k;
        Conv {
            w: self.uniform(format!("{name}.w"), &[cout, cin, k, k], cin * rf, cout * rf, scale),
            b: self.constant(format!("{name}.b"), &[cout], 0.0),
        }
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize, scale: f64) -> Linear {
        Linear {
            w: self.uniform(format!("{name}.w"), &[fout, fin], fin, fout, scale),
            b: self.constant(format!("{name}.b"), &[fout], 0.0),
        }
    }

    pub fn resampler(&mut self, name: &str, kind: Resample) -> Resampler {
        match kind {
            Resample::Nearest => Resampler::Nearest,
            Resample::Fir => {
                let taps = Tensor::from_vec(&[4], vec![0.125, 0.375, 0.375, 0.125]);
                Resampler::Fir(self.store.insert(format!("{name}.fir"), taps))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Resampler {
    Nearest,
    Fir(ParamId),
}

impl Resampler {
    pub fn down(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        match self {
            Resampler::Nearest => g.avg_pool2(x),
            Resampler::Fir(taps) => g.fir_down(x, p.var(*taps)),
        }
    }

    pub fn up(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        match self {
            Resampler::Nearest => g.up_nearest2(x),
            Resampler::Fir(taps) => g.fir_up(x, p.var(*taps)),
        }
    }
}

/// Largest divisor of `channels` not exceeding `min(max, channels / 4)` (at least 1).
pub(crate) fn norm_groups(channels: usize, max: usize) -> usize {
    let cap = max.min(channels / 4).max(1);
    (1..=cap).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Sinusoidal encoding of integer time indices, `[N, dim]`.
pub(crate) fn sinusoidal(times: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let log_max = 10_000f64.ln();
    let mut out = Vec::with_capacity(times.len() * dim);
    for &t in times {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-log_max * i as f64 / (half.max(2) - 1) as f64).exp());
        let (mut s, mut c): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        for f in freqs {
            s.push((t * f).sin());
            c.push((t * f).cos());
        }
        out.extend(s);
        out.extend(c);
    }
    Tensor::from_vec(&[times.len(), dim], out)
}

/// Two-layer MLP over the sinusoidal time encoding.
#[derive(Clone, Debug)]
pub(crate) struct TimeMlp {
    dim: usize,
    l0: Linear,
    l1: Linear,
}

impl TimeMlp {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            dim,
            l0: init.linear(&format!("{name}.0"), dim, dim, 1.0),
            l1: init.linear(&format!("{name}.1"), dim, dim, 1.0),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, times: &[usize]) -> Var {
        let enc = g.constant(sinusoidal(times, self.dim));
        let h = self.l0.apply(g, p, enc);
        let h = g.silu(h);
        self.l1.apply(g, p, h)
    }
}

/// Group normalisation modulated by the latent embedding: `GN(x)·(1 + s) + b`.
#[derive(Clone, Debug)]
pub(crate) struct AdaGroupNorm {
    groups: usize,
    scale: Linear,
    shift: Linear,
}

impl AdaGroupNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize, z_embed: usize, max_groups: usize) -> Self {
        Self {
            groups: norm_groups(channels, max_groups),
            scale: init.linear(&format!("{name}.scale"), z_embed, channels, 0.1),
            shift: init.linear(&format!("{name}.shift"), z_embed, channels, 0.1),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var, zemb: Var) -> Var {
        let h = g.group_norm(x, self.groups);
        let s = self.scale.apply(g, p, zemb);
        let b = self.shift.apply(g, p, zemb);
        g.modulate(h, s, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Direction {
    Flat,
    Down,
    Up,
}

/// Conditioning shared by every generator block in one forward pass.
pub(crate) struct Cond {
    /// `SiLU(time embedding)`, `[N, T]`.
    pub temb: Var,
    /// Latent embedding, `[N, Z]`.
    pub zemb: Var,
}

/// Residual generator block with adaptive normalisation and a time bias.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    dir: Direction,
    norm0: AdaGroupNorm,
    conv0: Conv,
    time: Linear,
    norm1: AdaGroupNorm,
    conv1: Conv,
    skip: Option<Conv>,
    resample: Option<Resampler>,
}

pub(crate) struct BlockSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub dir: Direction,
    pub temb: usize,
    pub zemb: usize,
    pub max_groups: usize,
    pub resample: Resample,
}

impl ResBlock {
    pub fn new(init: &mut Init, s: BlockSpec) -> Self {
        let name = s.name.as_str();
        let needs_skip = s.cin != s.cout || s.dir != Direction::Flat;
        Self {
            dir: s.dir,
            norm0: AdaGroupNorm::new(init, &format!("{name}.norm0"), s.cin, s.zemb, s.max_groups),
            conv0: init.conv(&format!("{name}.conv0"), s.cin, s.cout, 3, 1.0),
            time: init.linear(&format!("{name}.time"), s.temb, s.cout, 1.0),
            norm1: AdaGroupNorm::new(init, &format!("{name}.norm1"), s.cout, s.zemb, s.max_groups),
            conv1: init.conv(&format!("{name}.conv1"), s.cout, s.cout, 3, NEAR_ZERO),
            skip: needs_skip.then(|| init.conv(&format!("{name}.skip"), s.cin, s.cout, 1, 1.0)),
            resample: (s.dir != Direction::Flat).then(|| init.resampler(name, s.resample)),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var, c: &Cond) -> Var {
        let h = self.norm0.apply(g, p, x, c.zemb);
        let mut h = g.silu(h);
        let mut x = x;
        if let Some(r) = &self.resample {
            let (hh, xx) = match self.dir {
                Direction::Down => (r.down(g, p, h), r.down(g, p, x)),
                Direction::Up => (r.up(g, p, h), r.up(g, p, x)),
                Direction::Flat => unreachable!(),
            };
            h = hh;
            x = xx;
        }
        let h = self.conv0.apply(g, p, h);
        let bias = self.time.apply(g, p, c.temb);
        let h = g.add_channel_bias(h, bias);
        let h = self.norm1.apply(g, p, h, c.zemb);
        let h = g.silu(h);
        let h = self.conv1.apply(g, p, h);
        let x = match &self.skip {
            Some(s) => s.apply(g, p, x),
            None => x,
        };
        let sum = g.add(x, h);
        g.scale(sum, FRAC_1_SQRT_2)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub(crate) struct AttnBlock {
    norm: AdaGroupNorm,
    qkv: Conv,
    out: Conv,
}

impl AttnBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize, zemb: usize, max_groups: usize) -> Self {
        Self {
            norm: AdaGroupNorm::new(init, &format!("{name}.norm"), channels, zemb, max_groups),
            qkv: init.conv(&format!("{name}.qkv"), channels, 3 * channels, 1, 1.0),
            out: init.conv(&format!("{name}.out"), channels, channels, 1, NEAR_ZERO),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var, c: &Cond) -> Var {
        let h = self.norm.apply(g, p, x, c.zemb);
        let qkv = self.qkv.apply(g, p, h);
        let a = g.attention(qkv);
        let h = self.out.apply(g, p, a);
        let sum = g.add(x, h);
        g.scale(sum, FRAC_1_SQRT_2)
    }
}

/// Residual downsampling block of the discriminator.
#[derive(Clone, Debug)]
pub(crate) struct DownBlock {
    conv0: Conv,
    time: Linear,
    conv1: Conv,
    skip: Conv,
    resample: Resampler,
}

pub(crate) const LEAK: f64 = 0.2;

impl DownBlock {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, temb: usize, resample: Resample) -> Self {
        Self {
            conv0: init.conv(&format!("{name}.conv0"), cin, cout, 3, 1.0),
            time: init.linear(&format!("{name}.time"), temb, cout, 1.0),
            conv1: init.conv(&format!("{name}.conv1"), cout, cout, 3, 1.0),
            skip: init.conv(&format!("{name}.skip"), cin, cout, 1, 1.0),
            resample: init.resampler(name, resample),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var, temb: Var) -> Var {
        let h = g.leaky_relu(x, LEAK);
        let h = self.conv0.apply(g, p, h);
        let bias = self.time.apply(g, p, temb);
        let h = g.add_channel_bias(h, bias);
        let h = g.leaky_relu(h, LEAK);
        let h = self.resample.down(g, p, h);
        let h = self.conv1.apply(g, p, h);
        let x = self.resample.down(g, p, x);
        let x = self.skip.apply(g, p, x);
        let sum = g.add(x, h);
        g.scale(sum, FRAC_1_SQRT_2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counts_divide_channels() {
        assert_eq!(norm_groups(8, 4), 2);
        assert_eq!(norm_groups(16, 4), 4);
        assert_eq!(norm_groups(64, 32), 16);
        assert_eq!(norm_groups(3, 32), 1);
        assert_eq!(norm_groups(24, 32), 6);
    }

    #[test]
    fn sinusoidal_encoding_is_bounded_and_distinct() {
        let e = sinusoidal(&[0, 125, 1000], 16);
        assert_eq!(e.shape(), &[3, 16]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(&e.data()[..8], &[0.0; 8]);
        assert_ne!(e.batch_item(1), e.batch_item(2));
    }
}
