use crate::kernels::{attention, conv, norm, resample};
use crate::params::{ParamId, ParamStore};
use crate::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBatch(Var, Vec<f64>),
    AddChannelBias { x: Var, bias: Var },
    Modulate { x: Var, scale: Var, shift: Var },
    Conv2d { x: Var, weight: Var, bias: Option<Var> },
    Linear { x: Var, weight: Var, bias: Option<Var> },
    GroupNorm { x: Var, groups: usize, means: Vec<f64>, rstds: Vec<f64> },
    Silu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    AvgPool2(Var),
    UpNearest2(Var),
    FirDown { x: Var, taps: Var },
    FirUp { x: Var, taps: Var },
    Concat(Var, Var),
    Attention { qkv: Var, probs: Vec<f64> },
    SumSpatial(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameters of a [`ParamStore`] bound onto one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Gradients produced by [`Graph::backward`]; only leaf gradients are retained.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradients aligned with the bound store, zero-filled where a parameter
    /// did not influence the root.
    pub fn collect(&mut self, bound: &Bound, store: &ParamStore) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| self.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Append-only tape of tensor operations supporting reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records every tensor of `store` as a leaf.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bound {
        let vars = store
            .tensors()
            .iter()
            .map(|t| self.leaf(t.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// Copies the value of `v` into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Multiplies batch element `n` (leading axis) by `factors[n]`.
    pub fn scale_batch(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape()[0], factors.len(), "one factor per batch element");
        let stride = out.len() / factors.len();
        for (chunk, f) in out.data_mut().chunks_mut(stride).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        self.push(out, Op::ScaleBatch(a, factors), &[a])
    }

    /// `x[n, c, :, :] + bias[n, c]` for `x: [N, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(bias).shape(), &[n, c], "channel bias must be [N, C]");
        let mut out = self.value(x).clone();
        let hw = h * w;
        for (plane, b) in out.data_mut().chunks_mut(hw).zip(self.value(bias).data()) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        self.push(out, Op::AddChannelBias { x, bias }, &[x, bias])
    }

    /// `x·(1 + scale) + shift` with per-(sample, channel) `scale`, `shift: [N, C]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(scale).shape(), &[n, c], "modulation scale must be [N, C]");
        assert_eq!(self.value(shift).shape(), &[n, c], "modulation shift must be [N, C]");
        let mut out = self.value(x).clone();
        let hw = h * w;
        let s = self.value(scale).data();
        let t = self.value(shift).data();
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let (gain, off) = (1.0 + s[p], t[p]);
            plane.iter_mut().for_each(|v| *v = *v * gain + off);
        }
        self.push(out, Op::Modulate { x, scale, shift }, &[x, scale, shift])
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let out = conv::conv2d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)));
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(out, Op::Conv2d { x, weight, bias }, &inputs)
    }

    /// `x: [N, in]`, `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let (n, fin) = self.value(x).dims2();
        let (fout, win) = self.value(weight).dims2();
        assert_eq!(fin, win, "linear input width mismatch");
        let mut out = Tensor::zeros(&[n, fout]);
        let mut beta = 0.0;
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
            beta = 1.0;
        }
        conv::gemm(n, fin, fout, self.value(x).data(), false, self.value(weight).data(), true, beta, out.data_mut());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(out, Op::Linear { x, weight, bias }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let (out, means, rstds) = norm::group_norm_forward(self.value(x), groups);
        self.push(out, Op::GroupNorm { x, groups, means, rstds }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = resample::avg_pool2_forward(self.value(x));
        self.push(out, Op::AvgPool2(x), &[x])
    }

    pub fn up_nearest2(&mut self, x: Var) -> Var {
        let out = resample::up_nearest2_forward(self.value(x));
        self.push(out, Op::UpNearest2(x), &[x])
    }

    /// Learnable separable 4-tap FIR filtering followed by 2x decimation.
    pub fn fir_down(&mut self, x: Var, taps: Var) -> Var {
        let out = resample::fir_down_forward(self.value(x), self.value(taps));
        self.push(out, Op::FirDown { x, taps }, &[x, taps])
    }

    /// 2x zero insertion followed by learnable separable 4-tap FIR filtering.
    pub fn fir_up(&mut self, x: Var, taps: Var) -> Var {
        let out = resample::fir_up_forward(self.value(x), self.value(taps));
        self.push(out, Op::FirUp { x, taps }, &[x, taps])
    }

    /// Concatenates two `[N, C, H, W]` tensors along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert!(n == nb && h == hb && w == wb, "concat of incompatible shapes");
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            data.extend_from_slice(self.value(a).batch_item(i));
            data.extend_from_slice(self.value(b).batch_item(i));
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data);
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    /// Spatial self-attention; `qkv: [N, 3C, H, W]` packs queries, keys and values.
    pub fn attention(&mut self, qkv: Var) -> Var {
        let (out, probs) = attention::attention_forward(self.value(qkv));
        self.push(out, Op::Attention { qkv, probs }, &[qkv])
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn sum_spatial(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let data = self.value(x).data().chunks(h * w).map(|p| p.iter().sum()).collect();
        self.push(Tensor::from_vec(&[n, c], data), Op::SumSpatial(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.value(x).len() as f64;
        let out = Tensor::scalar(self.value(x).sum() / len);
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Reverse pass from a scalar `root` seeded with 1.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        self.backward_with(root, Tensor::full(self.value(root).shape(), 1.0))
    }

    /// Reverse pass from `root` seeded with an arbitrary cotangent.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    acc(*a, g.map(|v| v * f));
                }
            }
            Op::ScaleBatch(a, factors) => {
                if self.wants(*a) {
                    let mut ga = g.clone();
                    let stride = ga.len() / factors.len();
                    for (chunk, f) in ga.data_mut().chunks_mut(stride).zip(factors) {
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    acc(*a, ga);
                }
            }
            Op::AddChannelBias { x, bias } => {
                if self.wants(*x) {
                    acc(*x, g.clone());
                }
                if self.wants(*bias) {
                    let (n, c, h, w) = g.dims4();
                    let data = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    acc(*bias, Tensor::from_vec(&[n, c], data));
                }
            }
            Op::Modulate { x, scale, shift } => {
                let (n, c, h, w) = g.dims4();
                let hw = h * w;
                if self.wants(*x) {
                    let s = self.value(*scale).data();
                    let mut gx = g.clone();
                    for (p, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                        let gain = 1.0 + s[p];
                        plane.iter_mut().for_each(|v| *v *= gain);
                    }
                    acc(*x, gx);
                }
                if self.wants(*scale) {
                    let xv = self.value(*x).data();
                    let data = g
                        .data()
                        .chunks(hw)
                        .zip(xv.chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*scale, Tensor::from_vec(&[n, c], data));
                }
                if self.wants(*shift) {
                    let data = g.data().chunks(hw).map(|p| p.iter().sum()).collect();
                    acc(*shift, Tensor::from_vec(&[n, c], data));
                }
            }
            Op::Conv2d { x, weight, bias } => {
                let need_b = bias.is_some_and(|b| self.wants(b));
                let grads = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*weight),
                    g,
                    self.wants(*x),
                    self.wants(*weight),
                    need_b,
                );
                if let Some(t) = grads.x {
                    acc(*x, t);
                }
                if let Some(t) = grads.weight {
                    acc(*weight, t);
                }
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    acc(*b, t);
                }
            }
            Op::Linear { x, weight, bias } => {
                let (n, fin) = self.value(*x).dims2();
                let (fout, _) = self.value(*weight).dims2();
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(&[n, fin]);
                    conv::gemm(n, fout, fin, g.data(), false, self.value(*weight).data(), false, 0.0, gx.data_mut());
                    acc(*x, gx);
                }
                if self.wants(*weight) {
                    let mut gw = Tensor::zeros(&[fout, fin]);
                    conv::gemm(fout, n, fin, g.data(), true, self.value(*x).data(), false, 0.0, gw.data_mut());
                    acc(*weight, gw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut gb = vec![0.0; fout];
                    for row in g.data().chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc(b, Tensor::from_vec(&[fout], gb));
                }
            }
            Op::GroupNorm { x, groups, means, rstds } => {
                if self.wants(*x) {
                    acc(*x, norm::group_norm_backward(self.value(*x), g, *groups, means, rstds));
                }
            }
            Op::Silu(x) => {
                if self.wants(*x) {
                    acc(
                        *x,
                        g.zip_map(self.value(*x), |gv, xv| {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        }),
                    );
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.wants(*x) {
                    acc(*x, g.zip_map(self.value(*x), |gv, xv| if xv >= 0.0 { gv } else { gv * slope }));
                }
            }
            Op::Softplus(x) => {
                if self.wants(*x) {
                    acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv)));
                }
            }
            Op::AvgPool2(x) => {
                if self.wants(*x) {
                    acc(*x, resample::avg_pool2_backward(g, self.value(*x).shape()));
                }
            }
            Op::UpNearest2(x) => {
                if self.wants(*x) {
                    acc(*x, resample::up_nearest2_backward(g, self.value(*x).shape()));
                }
            }
            Op::FirDown { x, taps } => {
                let (gx, gt) = resample::fir_down_backward(
                    self.value(*x),
                    self.value(*taps),
                    g,
                    self.wants(*x),
                    self.wants(*taps),
                );
                if let Some(t) = gx {
                    acc(*x, t);
                }
                if let Some(t) = gt {
                    acc(*taps, t);
                }
            }
            Op::FirUp { x, taps } => {
                let (gx, gt) = resample::fir_up_backward(
                    self.value(*x),
                    self.value(*taps),
                    g,
                    self.wants(*x),
                    self.wants(*taps),
                );
                if let Some(t) = gx {
                    acc(*x, t);
                }
                if let Some(t) = gt {
                    acc(*taps, t);
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let (sa, sb) = (ca * h * w, cb * h * w);
                if self.wants(*a) {
                    let data = (0..n).flat_map(|i| g.batch_item(i)[..sa].to_vec()).collect();
                    acc(*a, Tensor::from_vec(&[n, ca, h, w], data));
                }
                if self.wants(*b) {
                    let data = (0..n).flat_map(|i| g.batch_item(i)[sa..sa + sb].to_vec()).collect();
                    acc(*b, Tensor::from_vec(&[n, cb, h, w], data));
                }
            }
            Op::Attention { qkv, probs } => {
                if self.wants(*qkv) {
                    acc(*qkv, attention::attention_backward(self.value(*qkv), probs, g));
                }
            }
            Op::SumSpatial(x) => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape();
                    let hw = shape[2] * shape[3];
                    let mut gx = Tensor::zeros(shape);
                    for (plane, gv) in gx.data_mut().chunks_mut(hw).zip(g.data()) {
                        plane.fill(*gv);
                    }
                    acc(*x, gx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    acc(*x, Tensor::full(self.value(*x).shape(), g.item()));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).len() as f64;
                    acc(*x, Tensor::full(self.value(*x).shape(), g.item() / len));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    acc(*x, g.clone().reshape(self.value(*x).shape()));
                }
            }
        }
    }
}
