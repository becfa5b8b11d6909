//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Parameters enter the tape once per graph; every
//! use adds into the same gradient, which is how weights shared across
//! recurrent steps accumulate.

use std::collections::HashMap;

use super::kernels::{self, Conv2dGeometry};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are clamped here before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geo: Conv2dGeometry,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Gather {
        x: Var,
        index: Vec<Vec<Option<usize>>>,
    },
    Sum(Var),
    WeightedCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<Option<usize>>,
        weights: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    mode: Mode,
    recording: bool,
    marks: Vec<usize>,
}

/// Gradients of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, v) in &self.params {
            if let Some(g) = self.wrt(*v) {
                if store.get(*id).trainable {
                    store.accumulate_grad(*id, g);
                }
            }
        }
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            mode,
            recording: true,
            marks: Vec::new(),
        }
    }

    /// A graph that evaluates but does not support `backward`.
    pub fn inference(mode: Mode) -> Self {
        Self {
            recording: false,
            ..Self::new(mode)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// The parameter as a graph leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let [_, cin, h, w] = self.shape(x);
        let [cout, kcin, kh, kw] = self.shape(k);
        if cin != kcin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(Error::shape(
                    "conv2d: bias length differs from output channels",
                ));
            }
        }
        if pad.1 > w {
            return Err(Error::shape(
                "conv2d: circular padding wider than the input",
            ));
        }
        let geo = Conv2dGeometry { stride, pad };
        if geo.output_size(h, w, kh, kw).is_none() {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} does not fit input {h}x{w}"
            )));
        }
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            geo,
        );
        Ok(self.push(out, Op::Conv2d { x, k, bias, geo }))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: (usize, usize),
    ) -> Result<Var> {
        let [_, cin, h, w] = self.shape(x);
        let [kcin, cout, _, _] = self.shape(k);
        if cin != kcin || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "conv_transpose2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(Error::shape("conv_transpose2d: bias length mismatch"));
            }
        }
        let out = kernels::conv_transpose2d_forward(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            stride,
        );
        Ok(self.push(out, Op::ConvTranspose2d { x, k, bias, stride }))
    }

    /// Batch normalization over `(n, h, w)` per channel. In train mode the batch
    /// statistics normalize and the running buffers track them (biased
    /// variance); in eval mode the running buffers normalize.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
    ) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        let m = n * h * w;
        if m == 0 {
            return Err(Error::shape("batch_norm: zero-size batch"));
        }
        if self.value(gamma).numel() != c
            || self.value(beta).numel() != c
            || running_mean.numel() != c
            || running_var.numel() != c
        {
            return Err(Error::shape(format!(
                "batch_norm: expected {c} channel parameters"
            )));
        }
        let xv = self.value(x);
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let batch_stats = self.mode == Mode::Train;
        if batch_stats {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let base = xv.index(b, ch, 0, 0);
                    s += xv.data()[base..base + hw].iter().sum::<f64>();
                }
                let mu = s / m as f64;
                let mut q = 0.0;
                for b in 0..n {
                    let base = xv.index(b, ch, 0, 0);
                    q += xv.data()[base..base + hw]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = q / m as f64;
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mu;
                let rv = &mut running_var.data_mut()[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch];
            }
        } else {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut xhat = vec![0.0; n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                let base = xv.index(b, ch, 0, 0);
                for i in base..base + hw {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out.data_mut()[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_vec(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 - x);
        self.push(out, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat of nothing"));
        };
        let [n, _, h, w] = self.shape(*first);
        let mut c_total = 0;
        for p in parts {
            let [pn, pc, ph, pw] = self.shape(*p);
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(*p),
                    self.shape(*first)
                )));
            }
            c_total += pc;
        }
        let mut out = Tensor::zeros([n, c_total, h, w]);
        let hw = h * w;
        for b in 0..n {
            let mut c0 = 0;
            for p in parts {
                let t = self.value(*p);
                let pc = t.shape()[1];
                let src = &t.data()[t.index(b, 0, 0, 0)..t.index(b, 0, 0, 0) + pc * hw];
                let dst0 = out.index(b, c0, 0, 0);
                out.data_mut()[dst0..dst0 + pc * hw].copy_from_slice(src);
                c0 += pc;
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Spatial gather: `out[b, :, p] = x[b, :, index[b][p]]`, zero where the
    /// index is `None`. Output pixel count is `index[b].len() = oh * ow`.
    pub fn gather(
        &mut self,
        x: Var,
        index: Vec<Vec<Option<usize>>>,
        oh: usize,
        ow: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if index.len() != n || index.iter().any(|i| i.len() != oh * ow) {
            return Err(Error::shape(
                "gather: index map does not match batch/output size",
            ));
        }
        if index.iter().flatten().flatten().any(|s| *s >= h * w) {
            return Err(Error::shape("gather: source pixel out of range"));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for (b, map) in index.iter().enumerate() {
            for (dst, src) in map.iter().enumerate() {
                let Some(src) = *src else { continue };
                for ch in 0..c {
                    let v = xv.data()[xv.index(b, ch, 0, 0) + src];
                    let oi = out.index(b, ch, 0, 0) + dst;
                    out.data_mut()[oi] = v;
                }
            }
        }
        Ok(self.push(out, Op::Gather { x, index }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Class-balanced cross entropy of channel softmax: mean over labelled
    /// pixels of `w_y * -ln(max(p_y, 1e-12))`. `labels` is indexed by
    /// `(batch, pixel)`; `None` pixels are ignored. No labelled pixels gives 0.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[Option<usize>],
        weights: &[f64],
    ) -> Result<Var> {
        let [n, c, h, w] = self.shape(logits);
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape(format!(
                "cross entropy: {} labels for {} pixels",
                labels.len(),
                n * hw
            )));
        }
        if weights.len() != c {
            return Err(Error::shape("cross entropy: one weight per class required"));
        }
        if labels.iter().flatten().any(|y| *y >= c) {
            return Err(Error::Label("cross entropy label out of range".into()));
        }
        let probs = softmax_channels(self.value(logits));
        let mut total = 0.0;
        let mut count = 0;
        for b in 0..n {
            for p in 0..hw {
                if let Some(y) = labels[b * hw + p] {
                    let py = probs.data()[probs.index(b, y, 0, 0) + p];
                    // NaN must survive the clamp so the caller can detect it.
                    let py = if py.is_nan() { py } else { py.max(LOG_CLAMP) };
                    total += weights[y] * -py.ln();
                    count += 1;
                }
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy {
                logits,
                probs: probs.into_data(),
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                count,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::State(
                "backward on a graph that recorded no operations".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "loss variable does not belong to this graph".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::State("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Conv2d { x, k, bias, geo } => {
                    let r = kernels::conv2d_backward(self.value(*x), self.value(*k), &g, *geo);
                    acc(&mut grads, *x, r.x);
                    acc(&mut grads, *k, r.k);
                    if let Some(b) = bias {
                        let shape = self.shape(*b);
                        acc(&mut grads, *b, Tensor::from_vec(shape, r.bias.into_data())?);
                    }
                }
                Op::ConvTranspose2d { x, k, bias, stride } => {
                    let r = kernels::conv_transpose2d_backward(
                        self.value(*x),
                        self.value(*k),
                        &g,
                        *stride,
                    );
                    acc(&mut grads, *x, r.x);
                    acc(&mut grads, *k, r.k);
                    if let Some(b) = bias {
                        let shape = self.shape(*b);
                        acc(&mut grads, *b, Tensor::from_vec(shape, r.bias.into_data())?);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let [n, c, h, w] = self.shape(*x);
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let gam = self.value(*gamma).data();
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for j in base..base + hw {
                                dg[ch] += g.data()[j] * xhat[j];
                                db[ch] += g.data()[j];
                            }
                        }
                    }
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for j in base..base + hw {
                                dx.data_mut()[j] = if *batch_stats {
                                    gam[ch] * inv_std[ch] / m
                                        * (m * g.data()[j] - db[ch] - xhat[j] * dg[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * g.data()[j]
                                };
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                    let gs = self.shape(*gamma);
                    acc(&mut grads, *gamma, Tensor::from_vec(gs, dg)?);
                    let bs = self.shape(*beta);
                    acc(&mut grads, *beta, Tensor::from_vec(bs, db)?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |gv, bv| gv * bv);
                    let gb = elementwise(&g, self.value(*a), |gv, av| gv * av);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::OneMinus(a) => acc(&mut grads, *a, g.map(|x| -x)),
                Op::Sigmoid(a) => {
                    let d = elementwise(&g, &node.value, |gv, y| gv * y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = elementwise(&g, &node.value, |gv, y| gv * (1.0 - y * y));
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = elementwise(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let [n, _, h, w] = g.shape();
                    let hw = h * w;
                    let mut c0 = 0;
                    for p in parts {
                        let shape = self.shape(*p);
                        let pc = shape[1];
                        let mut d = Tensor::zeros(shape);
                        for b in 0..n {
                            let src = g.index(b, c0, 0, 0);
                            let dst = d.index(b, 0, 0, 0);
                            d.data_mut()[dst..dst + pc * hw]
                                .copy_from_slice(&g.data()[src..src + pc * hw]);
                        }
                        acc(&mut grads, *p, d);
                        c0 += pc;
                    }
                }
                Op::Gather { x, index } => {
                    let shape = self.shape(*x);
                    let c = shape[1];
                    let mut d = Tensor::zeros(shape);
                    for (b, map) in index.iter().enumerate() {
                        for (dst, src) in map.iter().enumerate() {
                            let Some(src) = *src else { continue };
                            for ch in 0..c {
                                let di = d.index(b, ch, 0, 0) + src;
                                d.data_mut()[di] += g.data()[g.index(b, ch, 0, 0) + dst];
                            }
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    acc(&mut grads, *a, Tensor::full(shape, g.item()));
                }
                Op::WeightedCrossEntropy {
                    logits,
                    probs,
                    labels,
                    weights,
                    count,
                } => {
                    let shape = self.shape(*logits);
                    let [n, c, h, w] = shape;
                    let hw = h * w;
                    let mut d = Tensor::zeros(shape);
                    if *count > 0 {
                        let scale = g.item() / *count as f64;
                        for b in 0..n {
                            for p in 0..hw {
                                let Some(y) = labels[b * hw + p] else {
                                    continue;
                                };
                                let py = probs[((b * c + y) * hw) + p];
                                if py < LOG_CLAMP {
                                    continue;
                                }
                                for k in 0..c {
                                    let idx = (b * c + k) * hw + p;
                                    let onehot = if k == y { 1.0 } else { 0.0 };
                                    d.data_mut()[idx] = scale * weights[y] * (probs[idx] - onehot);
                                }
                            }
                        }
                    }
                    acc(&mut grads, *logits, d);
                }
            }
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(id, v)| (*id, *v)).collect();
        Ok(Gradients { grads, params })
    }

    /// Tags a node, e.g. the output of a residual unit, for depth queries.
    pub fn mark(&mut self, v: Var) {
        self.marks.push(v.0);
    }

    pub fn marks(&self) -> &[usize] {
        &self.marks
    }

    /// Largest number of `marks` nodes on any dependency path ending at `out`.
    pub fn max_marked_depth(&self, out: Var, marks: &[usize]) -> usize {
        let mut depth = vec![0usize; out.0 + 1];
        let marked: std::collections::HashSet<usize> = marks.iter().copied().collect();
        for i in 0..=out.0 {
            let best = self
                .inputs(i)
                .into_iter()
                .map(|v| depth[v.0])
                .max()
                .unwrap_or(0);
            depth[i] = best + usize::from(marked.contains(&i));
        }
        depth[out.0]
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => vec![],
            Op::Conv2d { x, k, bias, .. } | Op::ConvTranspose2d { x, k, bias, .. } => {
                let mut v = vec![*x, *k];
                v.extend(bias);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::OneMinus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sum(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Gather { x, .. } => vec![*x],
            Op::WeightedCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Whether `v` depends on any node in `sources`.
    pub fn depends_on(&self, v: Var, sources: &[Var]) -> bool {
        let mut reach = vec![false; v.0 + 1];
        for s in sources {
            if s.0 <= v.0 {
                reach[s.0] = true;
            }
        }
        for i in 0..=v.0 {
            if !reach[i] {
                reach[i] = self.inputs(i).iter().any(|p| reach[p.0]);
            }
        }
        reach[v.0]
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the channel axis of every pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for p in 0..hw {
            let idx = |k: usize| (b * c + k) * hw + p;
            let max = (0..c)
                .map(|k| x.data()[idx(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (x.data()[idx(k)] - max).exp();
                out.data_mut()[idx(k)] = e;
                s += e;
            }
            for k in 0..c {
                out.data_mut()[idx(k)] /= s;
            }
        }
    }
    out
}
