//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse creation order, so gradient
//! accumulation order is a pure function of the op sequence and results are
//! bit-reproducible.

use std::sync::Arc;

use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LinComb(Var, f64, Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Clamp01(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, k: usize },
    TemporalConv { x: Var, w: Var, b: Option<Var>, kt: usize },
    AvgPool2(Var),
    Upsample2(Var),
    PixelUnshuffle(Var, usize),
    PixelShuffle(Var, usize),
    Concat(Vec<Var>),
    RepeatFrame { x: Var, frame: usize },
    SliceFrames { x: Var, start: usize },
    AddChannelVec(Var, Var),
    MulChannelVec(Var, Var),
    AddFrameChannel(Var, Var),
    MulScalar(Var, Var),
    Row(Var, usize),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    L1Sum(Var, Var),
    MseMean(Var, Var),
    Style { x: Var, reference: Arc<Vec<f64>>, grams: Vec<f64> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Floor applied to probabilities inside the logarithm of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(&contrib) {
                *a += c;
            }
        }
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let acc = slot.get_or_insert_with(|| vec![0.0; len]);
    f(acc);
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims4(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.dims4()
    }

    /// A leaf that gradients are not propagated into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `ca * a + cb * b`, evaluated elementwise in exactly that form.
    pub fn lincomb(&mut self, a: Var, ca: f64, b: Var, cb: f64) -> Var {
        let v = self.zip_map(a, b, |x, y| ca * x + cb * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::LinComb(a, ca, b, cb), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::silu);
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Hard clamp to `[0, 1]`; the gradient is zero outside the interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.clamp(0.0, 1.0));
        let rg = self.rg(a);
        self.push(v, Op::Clamp01(a), rg)
    }

    /// Same-padded square convolution per frame. `x: [f, ci, h, w]`, `w: [co, ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let dims = self.dims4(x);
        let wd = self.dims4(w);
        assert_eq!(wd[1], dims[1], "conv2d input channels");
        assert_eq!(wd[2], wd[3], "conv2d kernel must be square");
        let (co, k) = (wd[0], wd[2]);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            dims,
            self.value(w).data(),
            co,
            k,
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![dims[0], co, dims[2], dims[3]], out);
        self.push(t, Op::Conv2d { x, w, b, k }, rg)
    }

    /// Convolution across frames. `x: [f, ci, h, w]`, `w: [co, ci, kt]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let dims = self.dims4(x);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[1], dims[1], "temporal conv input channels");
        let (co, kt) = (ws[0], ws[2]);
        let out = kernels::temporal_conv_forward(
            self.value(x).data(),
            dims,
            self.value(w).data(),
            co,
            kt,
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![dims[0], co, dims[2], dims[3]], out);
        self.push(t, Op::TemporalConv { x, w, b, kt }, rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [f, c, h, w] = self.dims4(x);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let out = kernels::avg_pool2_forward(self.value(x).data(), [f, c, h, w]);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![f, c, h / 2, w / 2], out), Op::AvgPool2(x), rg)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let [f, c, h, w] = self.dims4(x);
        let out = kernels::upsample2_forward(self.value(x).data(), [f, c, h, w]);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![f, c, 2 * h, 2 * w], out), Op::Upsample2(x), rg)
    }

    /// Space-to-depth: `[f, c, h, w] -> [f, c*r*r, h/r, w/r]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let [f, c, h, w] = self.dims4(x);
        assert!(h % r == 0 && w % r == 0);
        let out = kernels::pixel_unshuffle(self.value(x).data(), [f, c, h, w], r);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![f, c * r * r, h / r, w / r], out), Op::PixelUnshuffle(x, r), rg)
    }

    /// Depth-to-space, the inverse of [`Graph::pixel_unshuffle`].
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let [f, c, h, w] = self.dims4(x);
        assert!(c % (r * r) == 0);
        let original = [f, c / (r * r), h * r, w * r];
        let out = kernels::pixel_shuffle_into_original(self.value(x).data(), original, r);
        let rg = self.rg(x);
        self.push(Tensor::new(original.to_vec(), out), Op::PixelShuffle(x, r), rg)
    }

    /// Concatenates `[f, c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let [f, _, h, w] = self.dims4(xs[0]);
        let p = h * w;
        let chans: Vec<usize> = xs.iter().map(|&x| self.dims4(x)[1]).collect();
        let total: usize = chans.iter().sum();
        let mut out = vec![0.0; f * total * p];
        for fi in 0..f {
            let mut off = 0;
            for (&x, &c) in xs.iter().zip(&chans) {
                assert_eq!(self.dims4(x), [f, c, h, w], "concat shape mismatch");
                let src = &self.value(x).data()[fi * c * p..(fi + 1) * c * p];
                out[(fi * total + off) * p..(fi * total + off + c) * p].copy_from_slice(src);
                off += c;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(vec![f, total, h, w], out), Op::Concat(xs.to_vec()), rg)
    }

    /// Repeats frame `frame` of `x` across all frames.
    pub fn repeat_frame(&mut self, x: Var, frame: usize) -> Var {
        let [f, c, h, w] = self.dims4(x);
        let n = c * h * w;
        let src = self.value(x).data()[frame * n..(frame + 1) * n].to_vec();
        let mut out = Vec::with_capacity(f * n);
        for _ in 0..f {
            out.extend_from_slice(&src);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![f, c, h, w], out), Op::RepeatFrame { x, frame }, rg)
    }

    pub fn slice_frames(&mut self, x: Var, start: usize, len: usize) -> Var {
        let [f, c, h, w] = self.dims4(x);
        assert!(start + len <= f);
        let n = c * h * w;
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![len, c, h, w], out), Op::SliceFrames { x, start }, rg)
    }

    /// `x[f, c, :, :] + v[c]`.
    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Var {
        let [f, c, h, w] = self.dims4(x);
        assert_eq!(self.value(v).len(), c);
        let p = h * w;
        let mut out = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let b = vv[i % c];
            chunk.iter_mut().for_each(|o| *o += b);
        }
        let _ = f;
        let rg = self.rg(x) || self.rg(v);
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::AddChannelVec(x, v), rg)
    }

    /// `x[f, c, :, :] * v[c]`.
    pub fn mul_channel_vec(&mut self, x: Var, v: Var) -> Var {
        let [_, c, h, w] = self.dims4(x);
        assert_eq!(self.value(v).len(), c);
        let p = h * w;
        let mut out = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let s = vv[i % c];
            chunk.iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::MulChannelVec(x, v), rg)
    }

    /// `x[f, c, :, :] + m[f, c]`.
    pub fn add_frame_channel(&mut self, x: Var, m: Var) -> Var {
        let [f, c, h, w] = self.dims4(x);
        assert_eq!(self.shape(m), &[f, c]);
        let p = h * w;
        let mut out = self.value(x).data().to_vec();
        let mv = self.value(m).data();
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let b = mv[i];
            chunk.iter_mut().for_each(|o| *o += b);
        }
        let rg = self.rg(x) || self.rg(m);
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::AddFrameChannel(x, m), rg)
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(x).map(|a| a * sv);
        let rg = self.rg(x) || self.rg(s);
        self.push(v, Op::MulScalar(x, s), rg)
    }

    /// Row `r` of a `[rows, cols]` table, as a `[cols]` tensor.
    pub fn row(&mut self, table: Var, r: usize) -> Var {
        let shape = self.shape(table).to_vec();
        assert_eq!(shape.len(), 2);
        let cols = shape[1];
        let out = self.value(table).data()[r * cols..(r + 1) * cols].to_vec();
        let rg = self.rg(table);
        self.push(Tensor::new(vec![cols], out), Op::Row(table, r), rg)
    }

    /// Mean over frames and spatial positions: `[f, c, h, w] -> [c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [f, c, h, w] = self.dims4(x);
        let p = h * w;
        let mut out = vec![0.0; c];
        for (i, chunk) in self.value(x).data().chunks(p).enumerate() {
            out[i % c] += chunk.iter().sum::<f64>();
        }
        let inv = 1.0 / (f * p) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c], out), Op::GlobalAvgPool(x), rg)
    }

    /// `w[out, in] · x[in] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.shape(w).to_vec();
        let (o, i) = (ws[0], ws[1]);
        assert_eq!(self.value(x).len(), i);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = (0..o)
            .map(|r| bv[r] + wv[r * i..(r + 1) * i].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![o], out), Op::Linear { x, w, b }, rg)
    }

    /// `-ln max(softmax(logits)[target], PROB_FLOOR)`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let probs = softmax(self.value(logits).data());
        assert!(target < probs.len());
        let p = probs[target];
        let loss = -(p.max(PROB_FLOOR)).ln();
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, rg)
    }

    /// `sum |a - b|`.
    pub fn l1_sum(&mut self, a: Var, b: Var) -> Var {
        let v: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert_eq!(self.shape(a), self.shape(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::L1Sum(a, b), rg)
    }

    /// `mean (a - b)^2`.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let n = self.value(a).len() as f64;
        let v: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::MseMean(a, b), rg)
    }

    /// Gram-matrix style loss of `x: [f, c, h, w]` against precomputed per-frame
    /// reference Gram matrices (`f * c * c` values, see [`crate::bttf::gram_matrices`]).
    pub fn style_loss(&mut self, x: Var, reference: Arc<Vec<f64>>) -> Var {
        let dims = self.dims4(x);
        let [f, c, _, _] = dims;
        assert_eq!(reference.len(), f * c * c, "reference gram size");
        let grams = crate::bttf::gram_matrices(self.value(x).data(), dims);
        let sq: f64 = grams.iter().zip(reference.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let loss = sq / (f * c * c) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(loss), Op::Style { x, reference, grams }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward() needs a scalar output");
        self.backward_with(output, vec![1.0])
    }

    /// Reverse pass seeded with an arbitrary cotangent for `output`
    /// (a vector-Jacobian product).
    pub fn backward_with(&self, output: Var, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.value(output).len());
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if self.rg(b) {
                    accumulate(&mut grads[b.0], gy.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if self.rg(b) {
                    accumulate(&mut grads[b.0], gy.iter().map(|g| -g).collect());
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let vb = self.value(b).data();
                    accumulate(&mut grads[a.0], gy.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.rg(b) {
                    let va = self.value(a).data();
                    accumulate(&mut grads[b.0], gy.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale(a, c) => {
                if self.rg(a) {
                    accumulate(&mut grads[a.0], gy.iter().map(|g| c * g).collect());
                }
            }
            &Op::LinComb(a, ca, b, cb) => {
                if self.rg(a) {
                    accumulate(&mut grads[a.0], gy.iter().map(|g| ca * g).collect());
                }
                if self.rg(b) {
                    accumulate(&mut grads[b.0], gy.iter().map(|g| cb * g).collect());
                }
            }
            &Op::Silu(a) => {
                let va = self.value(a).data();
                accumulate(
                    &mut grads[a.0],
                    gy.iter().zip(va).map(|(g, &x)| g * kernels::silu_grad(x)).collect(),
                );
            }
            &Op::Sigmoid(a) => {
                let vy = node.value.data();
                accumulate(&mut grads[a.0], gy.iter().zip(vy).map(|(g, &s)| g * s * (1.0 - s)).collect());
            }
            &Op::Clamp01(a) => {
                let va = self.value(a).data();
                accumulate(
                    &mut grads[a.0],
                    gy.iter()
                        .zip(va)
                        .map(|(g, &x)| if (0.0..=1.0).contains(&x) { *g } else { 0.0 })
                        .collect(),
                );
            }
            &Op::Conv2d { x, w, b, k } => {
                let dims = self.dims4(x);
                let co = self.dims4(w)[0];
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut dx = self.rg(x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.rg(w).then(|| vec![0.0; wv.len()]);
                let mut db = b.filter(|&b| self.rg(b)).map(|_| vec![0.0; co]);
                kernels::conv2d_backward(
                    xv,
                    dims,
                    wv,
                    co,
                    k,
                    gy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    accumulate(&mut grads[x.0], d);
                }
                if let Some(d) = dw {
                    accumulate(&mut grads[w.0], d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    accumulate(&mut grads[b.0], d);
                }
            }
            &Op::TemporalConv { x, w, b, kt } => {
                let dims = self.dims4(x);
                let co = self.shape(w)[0];
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut dx = self.rg(x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.rg(w).then(|| vec![0.0; wv.len()]);
                let mut db = b.filter(|&b| self.rg(b)).map(|_| vec![0.0; co]);
                kernels::temporal_conv_backward(
                    xv,
                    dims,
                    wv,
                    co,
                    kt,
                    gy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    accumulate(&mut grads[x.0], d);
                }
                if let Some(d) = dw {
                    accumulate(&mut grads[w.0], d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    accumulate(&mut grads[b.0], d);
                }
            }
            &Op::AvgPool2(x) => {
                let dims = self.dims4(x);
                let len = self.value(x).len();
                accumulate_with(&mut grads[x.0], len, |dx| kernels::avg_pool2_backward(gy, dims, dx));
            }
            &Op::Upsample2(x) => {
                let dims = self.dims4(x);
                let len = self.value(x).len();
                accumulate_with(&mut grads[x.0], len, |dx| kernels::upsample2_backward(gy, dims, dx));
            }
            &Op::PixelUnshuffle(x, r) => {
                let dims = self.dims4(x);
                accumulate(&mut grads[x.0], kernels::pixel_shuffle_into_original(gy, dims, r));
            }
            &Op::PixelShuffle(x, r) => {
                let original = node.value.dims4();
                accumulate(&mut grads[x.0], kernels::pixel_unshuffle(gy, original, r));
            }
            Op::Concat(xs) => {
                let [f, total, h, w] = node.value.dims4();
                let p = h * w;
                let mut off = 0;
                for &x in xs {
                    let c = self.dims4(x)[1];
                    if self.rg(x) {
                        let mut d = Vec::with_capacity(f * c * p);
                        for fi in 0..f {
                            d.extend_from_slice(&gy[(fi * total + off) * p..(fi * total + off + c) * p]);
                        }
                        accumulate(&mut grads[x.0], d);
                    }
                    off += c;
                }
            }
            &Op::RepeatFrame { x, frame } => {
                let [f, c, h, w] = self.dims4(x);
                let n = c * h * w;
                accumulate_with(&mut grads[x.0], f * n, |dx| {
                    let dst = &mut dx[frame * n..(frame + 1) * n];
                    for chunk in gy.chunks(n) {
                        for (d, g) in dst.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                });
            }
            &Op::SliceFrames { x, start } => {
                let len = self.value(x).len();
                let n = gy.len();
                let off = start * (len / self.dims4(x)[0]);
                accumulate_with(&mut grads[x.0], len, |dx| {
                    for (d, g) in dx[off..off + n].iter_mut().zip(gy) {
                        *d += g;
                    }
                });
            }
            &Op::AddChannelVec(x, v) => {
                let [_, c, h, w] = self.dims4(x);
                if self.rg(x) {
                    accumulate(&mut grads[x.0], gy.to_vec());
                }
                if self.rg(v) {
                    let mut d = vec![0.0; c];
                    for (i, chunk) in gy.chunks(h * w).enumerate() {
                        d[i % c] += chunk.iter().sum::<f64>();
                    }
                    accumulate(&mut grads[v.0], d);
                }
            }
            &Op::MulChannelVec(x, v) => {
                let [_, c, h, w] = self.dims4(x);
                let p = h * w;
                let vv = self.value(v).data();
                if self.rg(x) {
                    let mut d = gy.to_vec();
                    for (i, chunk) in d.chunks_mut(p).enumerate() {
                        let s = vv[i % c];
                        chunk.iter_mut().for_each(|o| *o *= s);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                if self.rg(v) {
                    let xv = self.value(x).data();
                    let mut d = vec![0.0; c];
                    for (i, (gc, xc)) in gy.chunks(p).zip(xv.chunks(p)).enumerate() {
                        d[i % c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    }
                    accumulate(&mut grads[v.0], d);
                }
            }
            &Op::AddFrameChannel(x, m) => {
                let [f, c, h, w] = self.dims4(x);
                if self.rg(x) {
                    accumulate(&mut grads[x.0], gy.to_vec());
                }
                if self.rg(m) {
                    let d: Vec<f64> = gy.chunks(h * w).map(|ch| ch.iter().sum::<f64>()).collect();
                    debug_assert_eq!(d.len(), f * c);
                    accumulate(&mut grads[m.0], d);
                }
            }
            &Op::MulScalar(x, s) => {
                let sv = self.value(s).item();
                if self.rg(x) {
                    accumulate(&mut grads[x.0], gy.iter().map(|g| g * sv).collect());
                }
                if self.rg(s) {
                    let xv = self.value(x).data();
                    let d: f64 = gy.iter().zip(xv).map(|(g, a)| g * a).sum();
                    accumulate(&mut grads[s.0], vec![d]);
                }
            }
            &Op::Row(table, r) => {
                let len = self.value(table).len();
                let cols = gy.len();
                accumulate_with(&mut grads[table.0], len, |dt| {
                    for (d, g) in dt[r * cols..(r + 1) * cols].iter_mut().zip(gy) {
                        *d += g;
                    }
                });
            }
            &Op::GlobalAvgPool(x) => {
                let [f, c, h, w] = self.dims4(x);
                let p = h * w;
                let inv = 1.0 / (f * p) as f64;
                let mut d = vec![0.0; f * c * p];
                for (i, chunk) in d.chunks_mut(p).enumerate() {
                    chunk.fill(gy[i % c] * inv);
                }
                accumulate(&mut grads[x.0], d);
            }
            &Op::Linear { x, w, b } => {
                let ws = self.shape(w);
                let (o, inn) = (ws[0], ws[1]);
                let wv = self.value(w).data();
                if self.rg(x) {
                    let mut d = vec![0.0; inn];
                    for r in 0..o {
                        let g = gy[r];
                        for (dd, wr) in d.iter_mut().zip(&wv[r * inn..(r + 1) * inn]) {
                            *dd += g * wr;
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                if self.rg(w) {
                    let xv = self.value(x).data();
                    let mut d = vec![0.0; o * inn];
                    for r in 0..o {
                        for (dd, xi) in d[r * inn..(r + 1) * inn].iter_mut().zip(xv) {
                            *dd = gy[r] * xi;
                        }
                    }
                    accumulate(&mut grads[w.0], d);
                }
                if self.rg(b) {
                    accumulate(&mut grads[b.0], gy.to_vec());
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                let g = gy[0];
                // The floor only caps the reported value; the gradient stays the log-softmax one
                // so that confident wrong predictions still point toward the target.
                let d: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| g * (p - if k == *target { 1.0 } else { 0.0 }))
                    .collect();
                accumulate(&mut grads[logits.0], d);
            }
            &Op::L1Sum(a, b) => {
                let g = gy[0];
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let sign: Vec<f64> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            g
                        } else if d < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.rg(b) {
                    accumulate(&mut grads[b.0], sign.iter().map(|s| -s).collect());
                }
                if self.rg(a) {
                    accumulate(&mut grads[a.0], sign);
                }
            }
            &Op::MseMean(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let c = 2.0 * gy[0] / va.len() as f64;
                let d: Vec<f64> = va.iter().zip(vb).map(|(x, y)| c * (x - y)).collect();
                if self.rg(b) {
                    accumulate(&mut grads[b.0], d.iter().map(|v| -v).collect());
                }
                if self.rg(a) {
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Style { x, reference, grams } => {
                let dims = self.dims4(*x);
                let [f, c, _, _] = dims;
                let scale = gy[0] * 2.0 / (f * c * c) as f64;
                let diff: Vec<f64> = grams.iter().zip(reference.iter()).map(|(a, b)| scale * (a - b)).collect();
                let d = crate::bttf::gram_matrices_vjp(self.value(*x).data(), dims, &diff);
                accumulate(&mut grads[x.0], d);
            }
            &Op::Sum(x) => {
                let len = self.value(x).len();
                accumulate(&mut grads[x.0], vec![gy[0]; len]);
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
