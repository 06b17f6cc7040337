//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to it. Parameters are bound by
//! name; a name is bound at most once per graph so repeated use of the same
//! sub-network accumulates gradients into a single entry.

use std::collections::{BTreeMap, HashMap};

use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients of trainable parameters, keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside log-losses.
pub const PROB_CLAMP: f64 = 1e-7;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Upsample(usize, usize),
    AvgPool(usize, usize),
    GlobalAvgPool(usize),
    InstanceNorm(usize),
    ConcatChannels(usize, usize),
    BroadcastSpatial(usize),
    Reshape(usize),
    MeanAbsDiff(usize, usize),
    MeanSqDiff(usize, usize),
    BceClamped {
        logits: usize,
        target: Tensor,
    },
    SoftmaxXent {
        logits: usize,
        target: Tensor,
    },
    WeightedSum(Vec<(usize, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    /// Adds a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a named parameter. Trainable parameters receive gradients from
    /// [`Graph::backward`]; frozen ones behave as constants. Binding the same
    /// name twice returns the original node.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let op = if trainable {
            Op::Param(name.to_string())
        } else {
            Op::Constant
        };
        let v = self.push(value.clone(), op, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    /// 2-D convolution with zero padding. `x: [N,Ci,H,W]`, `w: [Co,Ci,k,k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let needs = self.ng(x.0) || self.ng(w.0) || b.is_some_and(|b| self.ng(b.0));
        self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            },
            needs,
        )
    }

    /// Affine map `x · wᵀ + b` with `x: [N,F]`, `w: [O,F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, f) = xv.dims2();
        let (o, f2) = wv.dims2();
        assert_eq!(f, f2, "linear: input features {f} vs weight {f2}");
        let mut out = Tensor::zeros(&[n, o]);
        gemm(
            n,
            f,
            o,
            xv.data(),
            false,
            wv.data(),
            true,
            out.data_mut(),
            0.0,
        );
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            assert_eq!(bv.len(), o, "linear: bias length");
            for row in out.data_mut().chunks_mut(o) {
                for (y, bb) in row.iter_mut().zip(&bv) {
                    *y += bb;
                }
            }
        }
        let needs = self.ng(x.0) || self.ng(w.0) || b.is_some_and(|b| self.ng(b.0));
        self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let mut out = av.clone();
        out.add_assign(bv);
        let needs = self.ng(a.0) || self.ng(b.0);
        self.push(out, Op::Add(a.0, b.0), needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let needs = self.ng(x.0);
        self.push(out, Op::Scale(x.0, s), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.ng(x.0);
        self.push(out, Op::Relu(x.0), needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v * slope });
        let needs = self.ng(x.0);
        self.push(out, Op::LeakyRelu(x.0, slope), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.ng(x.0);
        self.push(out, Op::Sigmoid(x.0), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let needs = self.ng(x.0);
        self.push(out, Op::Tanh(x.0), needs)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        self.upsample(x, 2)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, f: usize) -> Var {
        assert!(f > 0, "upsample factor must be positive");
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (h * f, w * f);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut dst[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    d[y * wo + xx] = s[(y / f) * w + xx / f];
                }
            }
        }
        let needs = self.ng(x.0);
        self.push(out, Op::Upsample(x.0, f), needs)
    }

    /// Non-overlapping `k x k` average pooling; spatial dims must be divisible by `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(
            k > 0 && h % k == 0 && w % k == 0,
            "avg_pool: {h}x{w} not divisible by {k}"
        );
        let (ho, wo) = (h / k, w / k);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let inv = 1.0 / (k * k) as f64;
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut dst[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    d[(y / k) * wo + xx / k] += s[y * w + xx] * inv;
                }
            }
        }
        let needs = self.ng(x.0);
        self.push(out, Op::AvgPool(x.0, k), needs)
    }

    /// Mean over spatial positions: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let data = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::from_vec(&[n, c], data).expect("pool shape");
        let needs = self.ng(x.0);
        self.push(out, Op::GlobalAvgPool(x.0), needs)
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance (no affine).
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, _, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = xv.clone();
        for plane in out.data_mut().chunks_mut(hw) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let needs = self.ng(x.0);
        self.push(out, Op::InstanceNorm(x.0), needs)
    }

    /// Channel-wise concatenation of two maps with equal batch and spatial dims.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca, h, w) = av.dims4();
        let (n2, cb, h2, w2) = bv.dims4();
        assert!(
            n == n2 && h == h2 && w == w2,
            "concat_channels: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            data.extend_from_slice(&av.data()[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&bv.data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data).expect("concat shape");
        let needs = self.ng(a.0) || self.ng(b.0);
        self.push(out, Op::ConcatChannels(a.0, b.0), needs)
    }

    /// Tiles a code `[N,C]` over an `h x w` grid: `[N,C,h,w]`.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.dims2();
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in xv.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let out = Tensor::from_vec(&[n, c, h, w], data).expect("broadcast shape");
        let needs = self.ng(x.0);
        self.push(out, Op::BroadcastSpatial(x.0), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let needs = self.ng(x.0);
        self.push(out, Op::Reshape(x.0), needs)
    }

    /// Mean absolute difference over all elements (scalar).
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mean_abs_diff: shape mismatch");
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let out = Tensor::scalar(s / av.len() as f64);
        let needs = self.ng(a.0) || self.ng(b.0);
        self.push(out, Op::MeanAbsDiff(a.0, b.0), needs)
    }

    /// Mean squared difference over all elements (scalar).
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mean_sq_diff: shape mismatch");
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / av.len() as f64);
        let needs = self.ng(a.0) || self.ng(b.0);
        self.push(out, Op::MeanSqDiff(a.0, b.0), needs)
    }

    /// Binary cross-entropy of `sigmoid(logits)` against a fixed `target`,
    /// averaged over elements, with the probability clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`. Clamped elements pass no gradient.
    pub fn bce_clamped(&mut self, logits: Var, target: f64) -> Var {
        let t = Tensor::full(self.value(logits).shape(), target);
        self.bce_clamped_with(logits, t)
    }

    /// [`Graph::bce_clamped`] with one target per logit.
    pub fn bce_clamped_with(&mut self, logits: Var, target: Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), target.len(), "bce target size");
        let s: f64 = lv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| bce_term(clamp_prob(sigmoid(z)), t))
            .sum();
        let out = Tensor::scalar(s / lv.len() as f64);
        let needs = self.ng(logits.0);
        self.push(
            out,
            Op::BceClamped {
                logits: logits.0,
                target,
            },
            needs,
        )
    }

    /// Cross-entropy between `softmax(logits)` rows and target distributions, averaged over rows.
    pub fn softmax_xent(&mut self, logits: Var, target: Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), target.shape(), "softmax_xent: target shape");
        let (n, k) = lv.dims2();
        let mut s = 0.0;
        for r in 0..n {
            let row = &lv.data()[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                s -= target.data()[r * k + j] * (row[j] - lse);
            }
        }
        let out = Tensor::scalar(s / n as f64);
        let needs = self.ng(logits.0);
        self.push(
            out,
            Op::SoftmaxXent {
                logits: logits.0,
                target,
            },
            needs,
        )
    }

    /// `Σ wᵢ · termᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = 0.0;
        for &(v, w) in terms {
            s += w * self.value(v).item();
        }
        let needs = terms.iter().any(|(v, _)| self.ng(v.0));
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum(terms.iter().map(|(v, w)| (v.0, *w)).collect()),
            needs,
        )
    }

    /// Reverse pass from a scalar node; returns gradients of every trainable
    /// parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, g, &mut grads, &mut out);
        }
        out
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        match &node.op {
            Op::Constant => {}
            Op::Param(name) => {
                out.insert(name.clone(), g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    &g,
                    *stride,
                    *pad,
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (n, f) = xv.dims2();
                let o = wv.shape()[0];
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(&[n, f]);
                    gemm(
                        n,
                        o,
                        f,
                        g.data(),
                        false,
                        wv.data(),
                        false,
                        dx.data_mut(),
                        0.0,
                    );
                    accumulate(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(&[o, f]);
                    gemm(
                        o,
                        n,
                        f,
                        g.data(),
                        true,
                        xv.data(),
                        false,
                        dw.data_mut(),
                        0.0,
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(&[o]);
                        for row in g.data().chunks(o) {
                            for (d, v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let d = zip_map(&g, xv, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.nodes[*x].value;
                let d = zip_map(&g, xv, |gv, xv| if xv > 0.0 { gv } else { gv * slope });
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(&g, &node.value, |gv, y| gv * y * (1.0 - y));
                accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = zip_map(&g, &node.value, |gv, y| gv * (1.0 - y * y));
                accumulate(grads, *x, d);
            }
            Op::Upsample(x, f) => {
                let (n, c, h, w) = self.nodes[*x].value.dims4();
                let (ho, wo) = (h * f, w * f);
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let src = g.data();
                let dst = d.data_mut();
                for plane in 0..n * c {
                    let s = &src[plane * ho * wo..(plane + 1) * ho * wo];
                    let dd = &mut dst[plane * h * w..(plane + 1) * h * w];
                    for y in 0..ho {
                        for xx in 0..wo {
                            dd[(y / f) * w + xx / f] += s[y * wo + xx];
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::AvgPool(x, k) => {
                let (n, c, h, w) = self.nodes[*x].value.dims4();
                let (ho, wo) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let src = g.data();
                let dst = d.data_mut();
                for plane in 0..n * c {
                    let s = &src[plane * ho * wo..(plane + 1) * ho * wo];
                    let dd = &mut dst[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dd[y * w + xx] = s[(y / k) * wo + xx / k] * inv;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.nodes[*x].value.dims4();
                let hw = h * w;
                let mut data = Vec::with_capacity(n * c * hw);
                for &v in g.data() {
                    data.extend(std::iter::repeat_n(v / hw as f64, hw));
                }
                accumulate(
                    grads,
                    *x,
                    Tensor::from_vec(&[n, c, h, w], data).expect("shape"),
                );
            }
            Op::InstanceNorm(x) => {
                let xv = &self.nodes[*x].value;
                let (_, _, h, w) = xv.dims4();
                let hw = h * w;
                let mut d = Tensor::zeros(xv.shape());
                for (((dp, gp), yp), xp) in d
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(g.data().chunks(hw))
                    .zip(node.value.data().chunks(hw))
                    .zip(xv.data().chunks(hw))
                {
                    let mean = xp.iter().sum::<f64>() / hw as f64;
                    let var = xp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    let g_mean = gp.iter().sum::<f64>() / hw as f64;
                    let gy_mean = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for ((dv, gv), yv) in dp.iter_mut().zip(gp).zip(yp) {
                        *dv = inv * (gv - g_mean - yv * gy_mean);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.nodes[*a].value.dims4();
                let cb = self.nodes[*b].value.shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&g.data()[base..base + ca * hw]);
                    db.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                if self.ng(*a) {
                    accumulate(
                        grads,
                        *a,
                        Tensor::from_vec(&[n, ca, h, w], da).expect("shape"),
                    );
                }
                if self.ng(*b) {
                    accumulate(
                        grads,
                        *b,
                        Tensor::from_vec(&[n, cb, h, w], db).expect("shape"),
                    );
                }
            }
            Op::BroadcastSpatial(x) => {
                let (_, _, h, w) = node.value.dims4();
                let data = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                let shape = self.nodes[*x].value.shape().to_vec();
                accumulate(grads, *x, Tensor::from_vec(&shape, data).expect("shape"));
            }
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                accumulate(grads, *x, g.reshaped(&shape));
            }
            Op::MeanAbsDiff(a, b) => {
                let gs = g.item();
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let k = gs / av.len() as f64;
                let d = zip_map(av, bv, |x, y| k * sign(x - y));
                if self.ng(*b) {
                    accumulate(grads, *b, d.map(|v| -v));
                }
                if self.ng(*a) {
                    accumulate(grads, *a, d);
                }
            }
            Op::MeanSqDiff(a, b) => {
                let gs = g.item();
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let k = 2.0 * gs / av.len() as f64;
                let d = zip_map(av, bv, |x, y| k * (x - y));
                if self.ng(*b) {
                    accumulate(grads, *b, d.map(|v| -v));
                }
                if self.ng(*a) {
                    accumulate(grads, *a, d);
                }
            }
            Op::BceClamped { logits, target } => {
                let gs = g.item();
                let lv = &self.nodes[*logits].value;
                let k = gs / lv.len() as f64;
                let data = lv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &t)| {
                        let p = sigmoid(z);
                        if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            k * (p - t)
                        }
                    })
                    .collect();
                let d = Tensor::from_vec(lv.shape(), data).expect("bce grad shape");
                accumulate(grads, *logits, d);
            }
            Op::SoftmaxXent { logits, target } => {
                let gs = g.item();
                let lv = &self.nodes[*logits].value;
                let (n, k) = lv.dims2();
                let mut d = Tensor::zeros(&[n, k]);
                for r in 0..n {
                    let row = &lv.data()[r * k..(r + 1) * k];
                    let lse = log_sum_exp(row);
                    let tsum: f64 = target.data()[r * k..(r + 1) * k].iter().sum();
                    for j in 0..k {
                        let p = (row[j] - lse).exp();
                        d.data_mut()[r * k + j] =
                            gs * (p * tsum - target.data()[r * k + j]) / n as f64;
                    }
                }
                accumulate(grads, *logits, d);
            }
            Op::WeightedSum(terms) => {
                let gs = g.item();
                for &(idx, w) in terms {
                    if self.ng(idx) {
                        accumulate(grads, idx, Tensor::scalar(gs * w));
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map shape")
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn bce_term(p: f64, target: f64) -> f64 {
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a `[N,K]` tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (_, k) = t.dims2();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(k) {
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    out
}

pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        size + 2 * pad >= k,
        "conv: kernel {k} larger than padded input {size}+2*{pad}"
    );
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let l = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_span(kj, stride, pad, w, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let seg = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    seg[..lo].fill(0.0);
                    seg[hi..].fill(0.0);
                    let x0 = lo * stride + kj - pad;
                    if stride == 1 {
                        seg[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (d, s) in seg[lo..hi].iter_mut().zip(src[x0..].iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose tap at kernel offset `kj` lands inside a row of width `w`.
fn valid_span(kj: usize, stride: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    let hi = if w + pad > kj {
        (w + pad - kj).div_ceil(stride).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let l = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_span(kj, stride, pad, w, wo);
                if lo >= hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let x0 = lo * stride + kj - pad;
                    let seg = &src[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        for (d, s) in dst[x0..x0 + hi - lo].iter_mut().zip(seg) {
                            *d += s;
                        }
                    } else {
                        for (d, s) in dst[x0..].iter_mut().step_by(stride).zip(seg) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = x.dims4();
    let (co, ci2, kh, kw) = w.dims4();
    assert_eq!(ci, ci2, "conv2d: input channels {ci} vs weight {ci2}");
    assert_eq!(kh, kw, "conv2d: square kernels only");
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wd, kw, stride, pad);
    let kdim = ci * kh * kw;
    let l = ho * wo;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut cols = vec![0.0; kdim * l];
    for s in 0..n {
        let xs = &x.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
        im2col(xs, ci, h, wd, kh, stride, pad, ho, wo, &mut cols);
        let ys = &mut out.data_mut()[s * co * l..(s + 1) * co * l];
        gemm(co, kdim, l, w.data(), false, &cols, false, ys, 0.0);
        if let Some(b) = b {
            for (c, row) in ys.chunks_mut(l).enumerate() {
                let bv = b.data()[c];
                for v in row {
                    *v += bv;
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, ci, h, wd) = x.dims4();
    let (co, _, k, _) = w.dims4();
    let (_, _, ho, wo) = g.dims4();
    let kdim = ci * k * k;
    let l = ho * wo;
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = Tensor::zeros(&[co]);
    let mut cols = vec![0.0; kdim * l];
    for s in 0..n {
        let gs = &g.data()[s * co * l..(s + 1) * co * l];
        for (c, row) in gs.chunks(l).enumerate() {
            db.data_mut()[c] += row.iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
            im2col(xs, ci, h, wd, k, stride, pad, ho, wo, &mut cols);
            gemm(co, l, kdim, gs, false, &cols, true, dw.data_mut(), 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kdim, co, l, w.data(), true, gs, false, &mut cols, 0.0);
            let dxs = &mut dx.data_mut()[s * ci * h * wd..(s + 1) * ci * h * wd];
            col2im_add(&cols, ci, h, wd, k, stride, pad, ho, wo, dxs);
        }
    }
    (dx, dw, db)
}
