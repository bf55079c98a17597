//! A small tape of tensor operations with reverse-mode (vector-Jacobian)
//! and forward-mode (Jacobian-vector) products.
//!
//! Every value is computed eagerly when its node is pushed, so the tape
//! doubles as the forward pass. Images and activation maps use the
//! `[height, width, channels]` layout; convolution kernels are stored as
//! `[out_channels, kernel, kernel, in_channels]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 3, "conv input must be [H, W, C], got {x:?}");
        assert_eq!(w.len(), 4, "conv kernel must be [Co, K, K, Ci], got {w:?}");
        assert_eq!(w[1], w[2], "only square kernels are supported");
        assert_eq!(x[2], w[3], "conv input has {} channels, kernel expects {}", x[2], w[3]);
        let (h, wd, k) = (x[0], x[1], w[1]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "input smaller than kernel");
        Self {
            h,
            w: wd,
            ci: x[2],
            co: w[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        }
    }

    /// Input row for output row `o` and kernel offset `kk`, if inside the image.
    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.ho * g.wo * g.co];
    for oh in 0..g.ho {
        for ow in 0..g.wo {
            let o = &mut out[(oh * g.wo + ow) * g.co..][..g.co];
            if let Some(b) = b {
                o.copy_from_slice(b);
            }
            for kh in 0..g.k {
                let Some(ih) = g.src(oh, kh, g.h) else { continue };
                for kw in 0..g.k {
                    let Some(iw) = g.src(ow, kw, g.w) else { continue };
                    let xin = &x[(ih * g.w + iw) * g.ci..][..g.ci];
                    for (oc, acc) in o.iter_mut().enumerate() {
                        let wr = &w[((oc * g.k + kh) * g.k + kw) * g.ci..][..g.ci];
                        *acc += wr.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(g: &ConvGeom, grad: &[f64], w: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; g.h * g.w * g.ci];
    for oh in 0..g.ho {
        for ow in 0..g.wo {
            let go = &grad[(oh * g.wo + ow) * g.co..][..g.co];
            for kh in 0..g.k {
                let Some(ih) = g.src(oh, kh, g.h) else { continue };
                for kw in 0..g.k {
                    let Some(iw) = g.src(ow, kw, g.w) else { continue };
                    let gin = &mut gx[(ih * g.w + iw) * g.ci..][..g.ci];
                    for (oc, &gv) in go.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let wr = &w[((oc * g.k + kh) * g.k + kw) * g.ci..][..g.ci];
                        for (a, &b) in gin.iter_mut().zip(wr) {
                            *a += gv * b;
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_backward_weight(g: &ConvGeom, grad: &[f64], x: &[f64]) -> Vec<f64> {
    let mut gw = vec![0.0; g.co * g.k * g.k * g.ci];
    for oh in 0..g.ho {
        for ow in 0..g.wo {
            let go = &grad[(oh * g.wo + ow) * g.co..][..g.co];
            for kh in 0..g.k {
                let Some(ih) = g.src(oh, kh, g.h) else { continue };
                for kw in 0..g.k {
                    let Some(iw) = g.src(ow, kw, g.w) else { continue };
                    let xin = &x[(ih * g.w + iw) * g.ci..][..g.ci];
                    for (oc, &gv) in go.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let wr = &mut gw[((oc * g.k + kh) * g.k + kw) * g.ci..][..g.ci];
                        for (a, &b) in wr.iter_mut().zip(xin) {
                            *a += gv * b;
                        }
                    }
                }
            }
        }
    }
    gw
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Norms below this map the channel vector to zero.
pub const NORMALIZE_GUARD: f64 = 1e-10;

enum Op {
    Leaf,
    ChannelAffine { x: Var, scale: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    ChannelNormalize { x: Var, norms: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    ScaleChannels(Var, Var),
    Sum(Var),
    SumSquares(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    BceLogits { z: Var, target: f64 },
    SoftmaxCrossEntropy { z: Var, probs: Vec<f64>, label: usize },
    Margin { z: Var, label: usize, rival: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`; zeros if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `y[.., c] = x[.., c] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().expect("non-scalar input");
        assert!(scale.len() == c && shift.len() == c);
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * scale[i % c] + shift[i % c];
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad);
        assert_eq!(self.value(b).shape(), &[geom.co]);
        let out = conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            Some(self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::new(vec![geom.ho, geom.wo, geom.co], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    /// Max pooling without padding.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3);
        let (h, w, c) = (s[0], s[1], s[2]);
        assert!(h >= kernel && w >= kernel, "pooling window larger than input");
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let mut out = vec![f64::NEG_INFINITY; ho * wo * c];
        let mut argmax = vec![0usize; ho * wo * c];
        let d = xv.data();
        for oh in 0..ho {
            for ow in 0..wo {
                for kh in 0..kernel {
                    for kw in 0..kernel {
                        let base = ((oh * stride + kh) * w + ow * stride + kw) * c;
                        for ch in 0..c {
                            let o = (oh * wo + ow) * c + ch;
                            if d[base + ch] > out[o] {
                                out[o] = d[base + ch];
                                argmax[o] = base + ch;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![ho, wo, c], out),
            Op::MaxPool { x, argmax },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Rescales the channel vector (last axis) at every location to unit
    /// l2 norm; vectors with norm below [`NORMALIZE_GUARD`] become zero.
    pub fn channel_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().expect("non-scalar input");
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.len() / c.max(1));
        for chunk in out.data_mut().chunks_mut(c) {
            let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < NORMALIZE_GUARD {
                chunk.iter_mut().for_each(|v| *v = 0.0);
                norms.push(0.0);
            } else {
                chunk.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::ChannelNormalize { x, norms }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Div(a, b), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::MulScalar(x, c), rg)
    }

    /// `y[.., c] = x[.., c] * w[c]` for a 1-D `w`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Var {
        let wv = self.value(w);
        let c = wv.len();
        let xv = self.value(x);
        assert_eq!(xv.shape().last(), Some(&c), "channel weight length mismatch");
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= wv.data()[i % c];
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::ScaleChannels(x, w), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Flattens and concatenates the inputs into one 1-D tensor.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::from_vec(data), Op::Concat(xs.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// `y = W x + b` with `W: [out, in]`, `x: [in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (o, i) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), i, "linear input length mismatch");
        assert_eq!(bv.len(), o);
        let out: Vec<f64> = (0..o)
            .map(|r| {
                bv.data()[r]
                    + wv.data()[r * i..(r + 1) * i]
                        .iter()
                        .zip(xv.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::from_vec(out), Op::Linear { x, w, b }, rg)
    }

    /// Binary cross-entropy of `sigmoid(z)` against `target`, computed from
    /// the logit for stability.
    pub fn bce_logits(&mut self, z: Var, target: f64) -> Var {
        let zv = self.value(z).item();
        let rg = self.rg(z);
        self.push(
            Tensor::scalar(softplus(zv) - target * zv),
            Op::BceLogits { z, target },
            rg,
        )
    }

    pub fn softmax_cross_entropy(&mut self, z: Var, label: usize) -> Var {
        let zv = self.value(z).data();
        assert!(label < zv.len());
        let m = zv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = zv.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / s).collect();
        let loss = m + s.ln() - zv[label];
        let rg = self.rg(z);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { z, probs, label },
            rg,
        )
    }

    /// `max_{i != label} z_i - z_label`.
    pub fn margin(&mut self, z: Var, label: usize) -> Var {
        let zv = self.value(z).data();
        assert!(zv.len() >= 2 && label < zv.len());
        let rival = (0..zv.len())
            .filter(|&i| i != label)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if zv[b] >= zv[i] => Some(b),
                _ => Some(i),
            })
            .expect("at least two classes");
        let v = zv[rival] - zv[label];
        let rg = self.rg(z);
        self.push(Tensor::scalar(v), Op::Margin { z, label, rival }, rg)
    }

    /// Elementwise sign. Not differentiable.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        if self.rg(x) {
            return Err(Error::NonDifferentiable { op: "sign" });
        }
        let out = self.value(x).map(f64::signum);
        Ok(self.push(out, Op::Leaf, false))
    }

    /// Elementwise rounding. Not differentiable.
    pub fn round(&mut self, x: Var) -> Result<Var> {
        if self.rg(x) {
            return Err(Error::NonDifferentiable { op: "round" });
        }
        let out = self.value(x).map(f64::round);
        Ok(self.push(out, Op::Leaf, false))
    }

    /// Reverse-mode pass seeded with `1` at a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward() needs a scalar output");
        self.vjp(output, Tensor::new(self.value(output).shape().to_vec(), vec![1.0]))
    }

    /// Vector-Jacobian product: propagates the cotangent `seed` of `output`
    /// back to every node that requires a gradient.
    pub fn vjp(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.len(), self.value(output).len());
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(output) {
            grads[output.0] = Some(seed.reshape(self.value(output).shape().to_vec()));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::ChannelAffine { x, scale } => {
                let c = scale.len();
                let mut gx = g.clone();
                for (j, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= scale[j % c];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.rg(*x) {
                    let gx = conv_backward_input(geom, g.data(), self.value(*w).data());
                    self.accumulate(grads, *x, Tensor::new(vec![geom.h, geom.w, geom.ci], gx));
                }
                if self.rg(*w) {
                    let gw = conv_backward_weight(geom, g.data(), self.value(*x).data());
                    self.accumulate(
                        grads,
                        *w,
                        Tensor::new(vec![geom.co, geom.k, geom.k, geom.ci], gw),
                    );
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; geom.co];
                    for chunk in g.data().chunks(geom.co) {
                        for (a, v) in gb.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(gb));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape().to_vec());
                for (o, &src) in argmax.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[o];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let gx =
                    g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { slope * gv });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *x, gx);
            }
            Op::ChannelNormalize { x, norms } => {
                let y = node.value.data();
                let c = y.len() / norms.len().max(1);
                let mut gx = Tensor::zeros(node.value.shape().to_vec());
                for (loc, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let ys = &y[loc * c..][..c];
                    let gs = &g.data()[loc * c..][..c];
                    let proj: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in gx.data_mut()[loc * c..][..c].iter_mut().zip(gs).zip(ys)
                    {
                        *o = (gv - yv * proj) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |gv, d| gv / d));
                }
                if self.rg(*b) {
                    let mut gb = g.zip_map(&node.value, |gv, y| gv * y);
                    gb = gb.zip_map(bv, |t, d| -t / d);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulScalar(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::ScaleChannels(x, w) => {
                let wv = self.value(*w).data();
                let c = wv.len();
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for (j, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= wv[j % c];
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; c];
                    for (j, (gv, xv)) in g.data().iter().zip(self.value(*x).data()).enumerate() {
                        gw[j % c] += gv * xv;
                    }
                    self.accumulate(grads, *w, Tensor::from_vec(gw));
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), s));
            }
            Op::SumSquares(x) => {
                let s = g.item();
                self.accumulate(grads, *x, self.value(*x).map(|v| 2.0 * s * v));
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let n = xv.len();
                    if self.rg(x) {
                        let part = Tensor::new(xv.shape().to_vec(), g.data()[off..off + n].to_vec());
                        self.accumulate(grads, x, part);
                    }
                    off += n;
                }
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.value(*x).shape().to_vec());
                self.accumulate(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let (o, inp) = (wv.shape()[0], wv.shape()[1]);
                if self.rg(*x) {
                    let mut gx = vec![0.0; inp];
                    for r in 0..o {
                        let gr = g.data()[r];
                        for (a, wr) in gx.iter_mut().zip(&wv.data()[r * inp..(r + 1) * inp]) {
                            *a += gr * wr;
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, gx));
                }
                if self.rg(*w) {
                    let xv = self.value(*x).data();
                    let mut gw = vec![0.0; o * inp];
                    for r in 0..o {
                        let gr = g.data()[r];
                        for (a, xx) in gw[r * inp..(r + 1) * inp].iter_mut().zip(xv) {
                            *a = gr * xx;
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![o, inp], gw));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::BceLogits { z, target } => {
                let zv = self.value(*z).item();
                let gz = g.item() * (sigmoid(zv) - target);
                self.accumulate(grads, *z, Tensor::new(self.value(*z).shape().to_vec(), vec![gz]));
            }
            Op::SoftmaxCrossEntropy { z, probs, label } => {
                let s = g.item();
                let mut gz = probs.clone();
                gz[*label] -= 1.0;
                gz.iter_mut().for_each(|v| *v *= s);
                self.accumulate(grads, *z, Tensor::from_vec(gz));
            }
            Op::Margin { z, label, rival } => {
                let s = g.item();
                let mut gz = vec![0.0; self.value(*z).len()];
                gz[*rival] += s;
                gz[*label] -= s;
                self.accumulate(grads, *z, Tensor::from_vec(gz));
            }
        }
    }

    /// Jacobian-vector product: pushes the tangents of the given leaves
    /// forward and returns the tangent of `output`.
    pub fn jvp(&self, tangents: &[(Var, &Tensor)], output: Var) -> Tensor {
        let mut tan: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        for (v, t) in tangents {
            assert_eq!(t.len(), self.value(*v).len(), "tangent length mismatch");
            if v.0 <= output.0 {
                tan[v.0] = Some(Tensor::new(self.value(*v).shape().to_vec(), t.data().to_vec()));
            }
        }
        for i in 0..=output.0 {
            if tan[i].is_some() {
                continue;
            }
            tan[i] = self.tangent_node(i, &tan);
        }
        tan[output.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.value(output).shape().to_vec()))
    }

    fn tangent_node(&self, i: usize, tan: &[Option<Tensor>]) -> Option<Tensor> {
        let node = &self.nodes[i];
        let t = |v: &Var| tan[v.0].as_ref();
        let zeros_like = |v: &Var| Tensor::zeros(self.value(*v).shape().to_vec());
        match &node.op {
            Op::Leaf => None,
            Op::ChannelAffine { x, scale } => t(x).map(|tx| {
                let c = scale.len();
                let mut out = tx.clone();
                for (j, v) in out.data_mut().iter_mut().enumerate() {
                    *v *= scale[j % c];
                }
                out
            }),
            Op::Conv2d { x, w, b, geom } => {
                if t(x).is_none() && t(w).is_none() && t(b).is_none() {
                    return None;
                }
                let mut out = vec![0.0; geom.ho * geom.wo * geom.co];
                if let Some(tx) = t(x) {
                    out = conv_forward(geom, tx.data(), self.value(*w).data(), None);
                }
                if let Some(tw) = t(w) {
                    let part = conv_forward(geom, self.value(*x).data(), tw.data(), None);
                    out.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                }
                if let Some(tb) = t(b) {
                    for chunk in out.chunks_mut(geom.co) {
                        chunk.iter_mut().zip(tb.data()).for_each(|(a, b)| *a += b);
                    }
                }
                Some(Tensor::new(node.value.shape().to_vec(), out))
            }
            Op::MaxPool { x, argmax } => t(x).map(|tx| {
                Tensor::new(
                    node.value.shape().to_vec(),
                    argmax.iter().map(|&s| tx.data()[s]).collect(),
                )
            }),
            Op::Relu(x) => {
                t(x).map(|tx| tx.zip_map(self.value(*x), |tv, xv| if xv > 0.0 { tv } else { 0.0 }))
            }
            Op::LeakyRelu(x, slope) => t(x).map(|tx| {
                tx.zip_map(self.value(*x), |tv, xv| if xv > 0.0 { tv } else { slope * tv })
            }),
            Op::Sigmoid(x) => t(x).map(|tx| tx.zip_map(&node.value, |tv, y| tv * y * (1.0 - y))),
            Op::ChannelNormalize { x, norms } => t(x).map(|tx| {
                let y = node.value.data();
                let c = y.len() / norms.len().max(1);
                let mut out = Tensor::zeros(node.value.shape().to_vec());
                for (loc, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let ys = &y[loc * c..][..c];
                    let ts = &tx.data()[loc * c..][..c];
                    let proj: f64 = ys.iter().zip(ts).map(|(a, b)| a * b).sum();
                    for ((o, &tv), &yv) in
                        out.data_mut()[loc * c..][..c].iter_mut().zip(ts).zip(ys)
                    {
                        *o = (tv - yv * proj) / n;
                    }
                }
                out
            }),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                match (t(a), t(b)) {
                    (None, None) => None,
                    (ta, tb) => {
                        let mut out = ta.cloned().unwrap_or_else(|| zeros_like(a));
                        if let Some(tb) = tb {
                            out.add_scaled(tb, sign);
                        }
                        Some(out)
                    }
                }
            }
            Op::Mul(a, b) => {
                if t(a).is_none() && t(b).is_none() {
                    return None;
                }
                let mut out = Tensor::zeros(node.value.shape().to_vec());
                if let Some(ta) = t(a) {
                    out.add_assign(&ta.zip_map(self.value(*b), |x, y| x * y));
                }
                if let Some(tb) = t(b) {
                    out.add_assign(&tb.zip_map(self.value(*a), |x, y| x * y));
                }
                Some(out)
            }
            Op::Div(a, b) => {
                if t(a).is_none() && t(b).is_none() {
                    return None;
                }
                let bv = self.value(*b);
                let mut out = Tensor::zeros(node.value.shape().to_vec());
                if let Some(ta) = t(a) {
                    out.add_assign(&ta.zip_map(bv, |x, d| x / d));
                }
                if let Some(tb) = t(b) {
                    let q = tb.zip_map(&node.value, |x, y| x * y);
                    out.add_assign(&q.zip_map(bv, |x, d| -x / d));
                }
                Some(out)
            }
            Op::AddScalar(x) => t(x).cloned(),
            Op::MulScalar(x, c) => t(x).map(|tx| tx.map(|v| v * c)),
            Op::ScaleChannels(x, w) => {
                if t(x).is_none() && t(w).is_none() {
                    return None;
                }
                let wv = self.value(*w).data();
                let c = wv.len();
                let mut out = Tensor::zeros(node.value.shape().to_vec());
                if let Some(tx) = t(x) {
                    for (j, (o, v)) in out.data_mut().iter_mut().zip(tx.data()).enumerate() {
                        *o += v * wv[j % c];
                    }
                }
                if let Some(tw) = t(w) {
                    let xv = self.value(*x).data();
                    for (j, (o, v)) in out.data_mut().iter_mut().zip(xv).enumerate() {
                        *o += v * tw.data()[j % c];
                    }
                }
                Some(out)
            }
            Op::Sum(x) => t(x).map(|tx| Tensor::scalar(tx.data().iter().sum())),
            Op::SumSquares(x) => t(x).map(|tx| Tensor::scalar(2.0 * tx.dot(self.value(*x)))),
            Op::Concat(xs) => {
                if xs.iter().all(|x| t(x).is_none()) {
                    return None;
                }
                let mut data = Vec::with_capacity(node.value.len());
                for x in xs {
                    match t(x) {
                        Some(tx) => data.extend_from_slice(tx.data()),
                        None => data.extend(std::iter::repeat_n(0.0, self.value(*x).len())),
                    }
                }
                Some(Tensor::from_vec(data))
            }
            Op::Reshape(x) => t(x).map(|tx| tx.clone().reshape(node.value.shape().to_vec())),
            Op::Linear { x, w, b } => {
                if t(x).is_none() && t(w).is_none() && t(b).is_none() {
                    return None;
                }
                let wv = self.value(*w);
                let (o, inp) = (wv.shape()[0], wv.shape()[1]);
                let mut out = vec![0.0; o];
                for (r, acc) in out.iter_mut().enumerate() {
                    if let Some(tx) = t(x) {
                        *acc += wv.data()[r * inp..(r + 1) * inp]
                            .iter()
                            .zip(tx.data())
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    if let Some(tw) = t(w) {
                        *acc += tw.data()[r * inp..(r + 1) * inp]
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    if let Some(tb) = t(b) {
                        *acc += tb.data()[r];
                    }
                }
                Some(Tensor::from_vec(out))
            }
            Op::BceLogits { z, target } => t(z).map(|tz| {
                let zv = self.value(*z).item();
                Tensor::scalar((sigmoid(zv) - target) * tz.item())
            }),
            Op::SoftmaxCrossEntropy { z, probs, label } => t(z).map(|tz| {
                let v: f64 = probs.iter().zip(tz.data()).map(|(p, tv)| p * tv).sum();
                Tensor::scalar(v - tz.data()[*label])
            }),
            Op::Margin { z, label, rival } => {
                t(z).map(|tz| Tensor::scalar(tz.data()[*rival] - tz.data()[*label]))
            }
        }
    }
}

/// Gradient of a scalar node with respect to each of `wrt`.
pub fn gradient(graph: &Graph, objective: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
    if graph.value(objective).len() != 1 {
        return Err(Error::Shape(format!(
            "gradient needs a scalar objective, got shape {:?}",
            graph.value(objective).shape()
        )));
    }
    let grads = graph.backward(objective);
    Ok(wrt.iter().map(|&v| grads.wrt(v)).collect())
}

pub(crate) fn logistic(z: f64) -> f64 {
    sigmoid(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&Tensor) -> f64>(f: F, x: &Tensor, h: f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let mut d = a.clone();
        d.add_scaled(b, -1.0);
        d.norm_l2() / a.norm_l2().max(b.norm_l2()).max(1e-12)
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn conv_net(x: &Tensor, w: &Tensor, b: &Tensor) -> (Graph, Var, Var, Var, Var) {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let bv = g.param(b.clone());
        let c = g.conv2d(xv, wv, bv, 2, 1);
        let a = g.leaky_relu(c, 0.1);
        let n = g.channel_normalize(a);
        let out = g.sum_squares(n);
        let s = g.sum(a);
        let tot = g.add(out, s);
        (g, xv, wv, bv, tot)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = Tensor::new(vec![5, 5, 2], pseudo(50, 1));
        let w = Tensor::new(vec![3, 3, 3, 2], pseudo(54, 2));
        let b = Tensor::from_vec(pseudo(3, 3));
        let (g, xv, wv, bv, out) = conv_net(&x, &w, &b);
        let grads = g.backward(out);
        let f_x = |t: &Tensor| {
            let (g, .., o) = conv_net(t, &w, &b);
            g.value(o).item()
        };
        let f_w = |t: &Tensor| {
            let (g, .., o) = conv_net(&x, t, &b);
            g.value(o).item()
        };
        let f_b = |t: &Tensor| {
            let (g, .., o) = conv_net(&x, &w, t);
            g.value(o).item()
        };
        assert!(rel_err(&grads.wrt(xv), &fd(f_x, &x, 1e-6)) < 1e-6);
        assert!(rel_err(&grads.wrt(wv), &fd(f_w, &w, 1e-6)) < 1e-6);
        assert!(rel_err(&grads.wrt(bv), &fd(f_b, &b, 1e-6)) < 1e-6);
    }

    #[test]
    fn jvp_and_vjp_are_adjoint() {
        let x = Tensor::new(vec![6, 6, 3], pseudo(108, 7));
        let mut g = Graph::new();
        let xv = g.param(x);
        let w = g.constant(Tensor::new(vec![4, 3, 3, 3], pseudo(108, 8)));
        let b = g.constant(Tensor::from_vec(pseudo(4, 9)));
        let c = g.conv2d(xv, w, b, 1, 1);
        let p = g.max_pool(c, 2, 2);
        let a = g.relu(p);
        let n = g.channel_normalize(a);
        let out = g.reshape(n, vec![36]);
        let v = Tensor::new(vec![6, 6, 3], pseudo(108, 10));
        let u = Tensor::from_vec(pseudo(36, 11));
        let jv = g.jvp(&[(xv, &v)], out);
        let jtu = g.vjp(out, u.clone()).wrt(xv);
        let lhs = jv.dot(&u);
        let rhs = v.dot(&jtu);
        assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn head_style_ops_gradients() {
        let build = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let w = g.constant(Tensor::new(vec![4, 3], pseudo(12, 5)));
            let b = g.constant(Tensor::from_vec(pseudo(4, 6)));
            let h = g.linear(xv, w, b);
            let h = g.sigmoid(h);
            let s = g.add_scalar(h, 0.5);
            let q = g.div(h, s);
            let m = g.mul(q, h);
            let z = g.sum(m);
            let l = g.bce_logits(z, 0.3);
            let ce = g.softmax_cross_entropy(m, 2);
            let mg = g.margin(m, 1);
            let t = g.add(l, ce);
            let t = g.add(t, mg);
            (g, xv, t)
        };
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1]);
        let (g, xv, out) = build(&x);
        let an = g.backward(out).wrt(xv);
        let num = fd(
            |t| {
                let (g, _, o) = build(t);
                g.value(o).item()
            },
            &x,
            1e-6,
        );
        assert!(rel_err(&an, &num) < 1e-6, "{an:?} vs {num:?}");
    }

    #[test]
    fn non_differentiable_ops_reject_gradient_inputs() {
        let mut g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![0.4, -1.2]));
        assert!(matches!(g.sign(p), Err(Error::NonDifferentiable { op: "sign" })));
        assert!(matches!(g.round(p), Err(Error::NonDifferentiable { op: "round" })));
        let c = g.constant(Tensor::from_vec(vec![0.4, -1.6]));
        let r = g.round(c).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, -2.0]);
    }

    #[test]
    fn gradient_requires_scalar_objective() {
        let mut g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let q = g.mul_scalar(p, 3.0);
        assert!(gradient(&g, q, &[p]).is_err());
        let s = g.sum_squares(q);
        let grads = gradient(&g, s, &[p]).unwrap();
        assert_eq!(grads[0].data(), &[18.0, 36.0]);
    }

    #[test]
    fn channel_normalize_zero_guard() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]));
        let n = g.channel_normalize(p);
        assert_eq!(g.value(n).data(), &[0.6, 0.8, 0.0, 0.0]);
        let s = g.sum(n);
        let gr = g.backward(s).wrt(p);
        assert_eq!(&gr.data()[2..], &[0.0, 0.0]);
    }
}
