use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::activation::{check_labels, sigmoid_scalar, softmax_cross_entropy_backward, softmax_cross_entropy_forward};
use crate::ops::channel::{
    channel_scale_backward, channel_scale_forward, check_channel_scale, check_gdconv, gdconv_backward, gdconv_forward,
    PadShortcut,
};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvDims, ConvGeometry};
use crate::ops::linear::{linear_backward, linear_dims, linear_forward};
use crate::ops::norm::{bn_backward, bn_dims, bn_forward, BatchStats, BnMode, RunningStats};
use crate::ops::pool::{
    adaptive_avg_pool_backward, adaptive_avg_pool_forward, check_adaptive_target, global_avg_pool_backward,
    global_avg_pool_forward, max_pool_forward, MaxPoolGeometry,
};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Piecewise-linear branch choices of one evaluation: a mask per ReLU and the winning input
/// index per max-pool output.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchPattern {
    pub relu: Vec<Vec<bool>>,
    pub max_pool: Vec<Vec<usize>>,
}

struct PinnedBranches {
    pattern: BranchPattern,
    relu_seen: usize,
    pool_seen: usize,
}

/// Handle to a value held by a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    Recording,
    /// Values are computed but nothing is written to the tape.
    Inference,
}

/// Operation tags, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Mul,
    Sum,
    Scale,
    Reshape,
    Relu,
    Sigmoid,
    Conv2d,
    AdaptiveAvgPool,
    GlobalAvgPool,
    MaxPool,
    BatchNorm,
    Linear,
    SoftmaxCrossEntropy,
    ChannelScale,
    GdConv,
    PadShortcut,
}

enum Op<T: Element> {
    Add(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    Scale(usize, T),
    Reshape(usize),
    /// ReLU; `mask` holds the branch pattern the output was computed with.
    Relu { x: usize, mask: Vec<bool> },
    Sigmoid(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, dims: ConvDims },
    AdaptiveAvgPool { x: usize, dims: (usize, usize, usize, usize), target: (usize, usize) },
    GlobalAvgPool { x: usize, plane: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, mode: BnMode, dims: (usize, usize, usize) },
    Linear { x: usize, w: usize, b: Option<usize>, dims: (usize, usize, usize) },
    SoftmaxCe { logits: usize, probs: Vec<T>, labels: Vec<usize>, k: usize },
    ChannelScale { y: usize, v: usize, plane: usize },
    GdConv { u: usize, kernel: usize, bias: usize, n: usize, c: usize, plane: usize },
    PadShortcut { x: usize, geo: PadShortcut },
}

impl<T: Element> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Sum(..) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AdaptiveAvgPool { .. } => OpKind::AdaptiveAvgPool,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Linear { .. } => OpKind::Linear,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::ChannelScale { .. } => OpKind::ChannelScale,
            Op::GdConv { .. } => OpKind::GdConv,
            Op::PadShortcut { .. } => OpKind::PadShortcut,
        }
    }
}

struct TapeEntry<T: Element> {
    output: usize,
    op: Op<T>,
}

/// Values plus an append-only tape of the operations that produced them.
///
/// Tape entries are appended in execution order, so every entry's inputs
/// precede it and the reverse sweep in [`Graph::backward`] is a valid
/// reverse topological order.
pub struct Graph<T: Element = f32> {
    id: u64,
    mode: GraphMode,
    values: Vec<Tensor<T>>,
    needs_grad: Vec<bool>,
    tape: Vec<TapeEntry<T>>,
    fault: Option<(OpKind, T)>,
    pinned: Option<PinnedBranches>,
}

/// Result of a reverse sweep: one optional gradient per graph value.
pub struct Gradients<T: Element = f32> {
    graph: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

fn add_into<T: Element>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::with_mode(GraphMode::Recording)
    }

    pub fn inference() -> Self {
        Self::with_mode(GraphMode::Inference)
    }

    pub fn with_mode(mode: GraphMode) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            mode,
            values: Vec::new(),
            needs_grad: Vec::new(),
            tape: Vec::new(),
            fault: None,
            pinned: None,
        }
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    pub fn value_count(&self) -> usize {
        self.values.len()
    }

    /// Operation tags on the tape, in recording order.
    pub fn tape_ops(&self) -> Vec<OpKind> {
        self.tape.iter().map(|e| e.op.kind()).collect()
    }

    /// Multiplies every gradient produced by `kind`'s backward rule by `factor`.
    ///
    /// Exists for negative-control testing of gradient checkers.
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: T) {
        self.fault = Some((kind, factor));
    }

    fn push_value(&mut self, t: Tensor<T>, needs_grad: bool) -> Var {
        self.values.push(t);
        self.needs_grad.push(needs_grad && self.mode == GraphMode::Recording);
        Var { graph: self.id, index: self.values.len() - 1 }
    }

    /// A differentiable leaf (parameter or input whose gradient is wanted).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_value(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_value(t, false)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.values.len() {
            return Err(Error::DetachedTensor(format!("{v:?}")));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.values[self.idx(v)?])
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    fn record(&mut self, out: Tensor<T>, inputs: &[usize], op: Op<T>) -> Var {
        let needs = inputs.iter().any(|&i| self.needs_grad[i]);
        let var = self.push_value(out, needs);
        if self.mode == GraphMode::Recording {
            self.tape.push(TapeEntry { output: var.index, op });
        }
        var
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(Error::SizeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.values[a].shape(),
                self.values[b].shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b, "add")?;
        let data = self.values[a].data().iter().zip(self.values[b].data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(self.values[a].shape().to_vec(), data);
        Ok(self.record(out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b, "mul")?;
        let data = self.values[a].data().iter().zip(self.values[b].data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(self.values[a].shape().to_vec(), data);
        Ok(self.record(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let out = Tensor::from_parts(vec![1], vec![self.values[x].sum()]);
        Ok(self.record(out, &[x], Op::Sum(x)))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let x = self.idx(x)?;
        let out = self.values[x].map(|v| v * k);
        Ok(self.record(out, &[x], Op::Scale(x, k)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let x = self.idx(x)?;
        let out = self.values[x].reshape(shape)?;
        Ok(self.record(out, &[x], Op::Reshape(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let mask = match &mut self.pinned {
            Some(p) => {
                let mask = p.pattern.relu.get(p.relu_seen).cloned().ok_or_else(|| Error::InvalidConfig("more ReLUs than the pinned pattern".into()))?;
                p.relu_seen += 1;
                if mask.len() != self.values[x].numel() {
                    return Err(Error::SizeMismatch("pinned ReLU mask does not match its input".into()));
                }
                mask
            }
            None => self.values[x].data().iter().map(|&v| v > T::zero()).collect(),
        };
        let data = self.values[x].data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::zero() }).collect();
        let out = Tensor::from_parts(self.values[x].shape().to_vec(), data);
        Ok(self.record(out, &[x], Op::Relu { x, mask }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let out = self.values[x].map(sigmoid_scalar);
        Ok(self.record(out, &[x], Op::Sigmoid(x)))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, geometry: ConvGeometry) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(kernel)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let dims = ConvDims::resolve(self.values[xi].shape(), self.values[wi].shape(), geometry)?;
        let c_out = self.values[wi].shape()[0];
        if let Some(b) = bi {
            if self.values[b].shape() != [c_out] {
                return Err(Error::SizeMismatch(format!("conv bias {:?} for {c_out} channels", self.values[b].shape())));
            }
        }
        let y = conv2d_forward(&dims, self.values[xi].data(), self.values[wi].data(), bi.map(|b| self.values[b].data()));
        let out = Tensor::from_parts(dims.output_shape(), y);
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        Ok(self.record(out, &inputs, Op::Conv2d { x: xi, w: wi, b: bi, dims }))
    }

    fn nchw(&self, x: usize, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.values[x].shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::InvalidShape(format!("{what} expects NCHW, got {s:?}"))),
        }
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let xi = self.idx(x)?;
        let dims = self.nchw(xi, "adaptive_avg_pool")?;
        check_adaptive_target(dims.2, dims.3, target)?;
        let y = adaptive_avg_pool_forward(self.values[xi].data(), dims, target);
        let out = Tensor::from_parts(vec![dims.0, dims.1, target.0, target.1], y);
        Ok(self.record(out, &[xi], Op::AdaptiveAvgPool { x: xi, dims, target }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = self.nchw(xi, "global_avg_pool")?;
        let out = Tensor::from_parts(vec![n, c], global_avg_pool_forward(self.values[xi].data(), h * w));
        Ok(self.record(out, &[xi], Op::GlobalAvgPool { x: xi, plane: h * w }))
    }

    pub fn max_pool(&mut self, x: Var, geometry: MaxPoolGeometry) -> Result<Var> {
        let xi = self.idx(x)?;
        let dims = self.nchw(xi, "max_pool")?;
        let (mut y, mut argmax, (ho, wo)) = max_pool_forward(self.values[xi].data(), dims, geometry)?;
        if let Some(p) = &mut self.pinned {
            let pinned = p.pattern.max_pool.get(p.pool_seen).cloned().ok_or_else(|| Error::InvalidConfig("more max pools than the pinned pattern".into()))?;
            p.pool_seen += 1;
            if pinned.len() != argmax.len() {
                return Err(Error::SizeMismatch("pinned max-pool winners do not match its output".into()));
            }
            let x = self.values[xi].data();
            y = pinned.iter().map(|&i| x[i]).collect();
            argmax = pinned;
        }
        let out = Tensor::from_parts(vec![dims.0, dims.1, ho, wo], y);
        Ok(self.record(out, &[xi], Op::MaxPool { x: xi, argmax }))
    }

    /// Records batch normalization. In training mode the batch statistics are returned so the
    /// owner of `running` can fold them in.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let dims = bn_dims(self.values[xi].shape())?;
        if self.values[gi].numel() != dims.1 || self.values[bi].numel() != dims.1 || running.channels() != dims.1 {
            return Err(Error::SizeMismatch(format!("batch_norm affine/statistics do not cover {} channels", dims.1)));
        }
        let f = bn_forward(self.values[xi].data(), dims, self.values[gi].data(), self.values[bi].data(), running, mode, eps);
        let out = Tensor::from_parts(self.values[xi].shape().to_vec(), f.y);
        let var = self.record(
            out,
            &[xi, gi, bi],
            Op::BatchNorm { x: xi, gamma: gi, beta: bi, xhat: f.xhat, inv_std: f.inv_std, mode, dims },
        );
        Ok((var, f.batch))
    }

    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(weight)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let dims = linear_dims(self.values[xi].shape(), self.values[wi].shape(), bi.map(|b| self.values[b].shape()))?;
        let y = linear_forward(self.values[xi].data(), self.values[wi].data(), bi.map(|b| self.values[b].data()), dims);
        let out = Tensor::from_parts(vec![dims.0, dims.2], y);
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        Ok(self.record(out, &inputs, Op::Linear { x: xi, w: wi, b: bi, dims }))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels; a one-element value.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let (n, k) = check_labels(self.values[li].shape(), labels)?;
        let (loss, probs) = softmax_cross_entropy_forward(self.values[li].data(), n, k, labels);
        let out = Tensor::from_parts(vec![1], vec![loss]);
        Ok(self.record(out, &[li], Op::SoftmaxCe { logits: li, probs, labels: labels.to_vec(), k }))
    }

    /// `y[n, c, ..] * v[n, c]`.
    pub fn channel_scale(&mut self, y: Var, v: Var) -> Result<Var> {
        let (yi, vi) = (self.idx(y)?, self.idx(v)?);
        let plane = check_channel_scale(self.values[yi].shape(), self.values[vi].shape())?;
        let data = channel_scale_forward(self.values[yi].data(), self.values[vi].data(), plane);
        let out = Tensor::from_parts(self.values[yi].shape().to_vec(), data);
        Ok(self.record(out, &[yi, vi], Op::ChannelScale { y: yi, v: vi, plane }))
    }

    /// Global depthwise convolution with per-channel bias: `[N, C, h, w] -> [N, C]`.
    pub fn gdconv(&mut self, u: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ui, ki, bi) = (self.idx(u)?, self.idx(kernel)?, self.idx(bias)?);
        let (n, c, plane) = check_gdconv(self.values[ui].shape(), self.values[ki].shape(), self.values[bi].shape())?;
        let data = gdconv_forward(self.values[ui].data(), self.values[ki].data(), self.values[bi].data(), n, c, plane);
        let out = Tensor::from_parts(vec![n, c], data);
        Ok(self.record(out, &[ui, ki, bi], Op::GdConv { u: ui, kernel: ki, bias: bi, n, c, plane }))
    }

    /// Subsample by `stride` and zero-pad channels up to `c_out`.
    pub fn pad_shortcut(&mut self, x: Var, c_out: usize, stride: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let geo = PadShortcut::resolve(self.values[xi].shape(), c_out, stride)?;
        let out = Tensor::from_parts(geo.output_shape(), geo.forward(self.values[xi].data()));
        Ok(self.record(out, &[xi], Op::PadShortcut { x: xi, geo }))
    }

    /// Fingerprint of every piecewise-linear branch taken on the tape (ReLU signs and
    /// max-pool winners). Two evaluations with equal fingerprints lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for e in &self.tape {
            match &e.op {
                Op::Relu { mask, .. } => mask.hash(&mut h),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// The ReLU masks and max-pool winners recorded so far, in execution order.
    pub fn branch_pattern(&self) -> BranchPattern {
        let mut p = BranchPattern::default();
        for e in &self.tape {
            match &e.op {
                Op::Relu { mask, .. } => p.relu.push(mask.clone()),
                Op::MaxPool { argmax, .. } => p.max_pool.push(argmax.clone()),
                _ => {}
            }
        }
        p
    }

    /// Makes later ReLUs and max pools follow `pattern` instead of the signs and maxima of their
    /// inputs. The result is the smooth piece of the network that contains the point where the
    /// pattern was taken, extended to nearby inputs.
    pub fn pin_branches(&mut self, pattern: BranchPattern) {
        self.pinned = Some(PinnedBranches { pattern, relu_seen: 0, pool_seen: 0 });
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.mode == GraphMode::Inference {
            return Err(Error::InferenceGraph);
        }
        if self.values[li].numel() != 1 {
            return Err(Error::NonScalarLoss(self.values[li].shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[li] = Some(vec![T::one()]);
        for entry in self.tape.iter().rev() {
            if entry.output > li {
                continue;
            }
            let Some(g) = grads[entry.output].take() else { continue };
            let contributions = self.backward_rule(&entry.op, &g);
            grads[entry.output] = Some(g);
            let factor = match self.fault {
                Some((kind, f)) if kind == entry.op.kind() => Some(f),
                _ => None,
            };
            for (input, mut contrib) in contributions {
                if !self.needs_grad[input] {
                    continue;
                }
                if let Some(f) = factor {
                    contrib.iter_mut().for_each(|v| *v = *v * f);
                }
                match &mut grads[input] {
                    Some(acc) => add_into(acc, &contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.needs_grad[i] {
                *g = None;
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn backward_rule(&self, op: &Op<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let val = |i: usize| self.values[i].data();
        let wants = |i: usize| self.needs_grad[i];
        match op {
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => vec![
                (*a, g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect()),
                (*b, g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect()),
            ],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.values[*x].numel()])],
            Op::Scale(x, k) => vec![(*x, g.iter().map(|&v| v * *k).collect())],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Relu { x, mask } => vec![(*x, g.iter().zip(mask).map(|(&g, &m)| if m { g } else { T::zero() }).collect())],
            Op::Sigmoid(x) => {
                let y = self.values[*x].map(sigmoid_scalar);
                vec![(*x, g.iter().zip(y.data()).map(|(&g, &s)| g * s * (T::one() - s)).collect())]
            }
            Op::Conv2d { x, w, b, dims } => {
                let cg = conv2d_backward(dims, val(*x), val(*w), g, wants(*x));
                let mut out = vec![(*w, cg.kernel)];
                if wants(*x) {
                    out.push((*x, cg.input));
                }
                if let Some(b) = b {
                    out.push((*b, cg.bias));
                }
                out
            }
            Op::AdaptiveAvgPool { x, dims, target } => vec![(*x, adaptive_avg_pool_backward(g, *dims, *target))],
            Op::GlobalAvgPool { x, plane } => vec![(*x, global_avg_pool_backward(g, *plane))],
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.values[*x].numel()];
                for (&gv, &i) in g.iter().zip(argmax) {
                    dx[i] = dx[i] + gv;
                }
                vec![(*x, dx)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode, dims } => {
                let bg = bn_backward(g, xhat, inv_std, val(*gamma), *dims, *mode);
                vec![(*x, bg.input), (*gamma, bg.gamma), (*beta, bg.beta)]
            }
            Op::Linear { x, w, b, dims } => {
                let lg = linear_backward(g, val(*x), val(*w), *dims);
                let mut out = vec![(*x, lg.input), (*w, lg.weight)];
                if let Some(b) = b {
                    out.push((*b, lg.bias));
                }
                out
            }
            Op::SoftmaxCe { logits, probs, labels, k } => {
                vec![(*logits, softmax_cross_entropy_backward(probs, *k, labels, g[0]))]
            }
            Op::ChannelScale { y, v, plane } => {
                let (dy, dv) = channel_scale_backward(g, val(*y), val(*v), *plane);
                vec![(*y, dy), (*v, dv)]
            }
            Op::GdConv { u, kernel, bias, n, c, plane } => {
                let gg = gdconv_backward(g, val(*u), val(*kernel), *n, *c, *plane);
                vec![(*u, gg.input), (*kernel, gg.kernel), (*bias, gg.bias)]
            }
            Op::PadShortcut { x, geo } => vec![(*x, geo.backward(g))],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_gives_twice_x() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.1, 0.2, 0.3]));
        let a = g.sum(x).unwrap();
        let b = g.sum(x).unwrap();
        let l = g.add(a, b).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn unreachable_and_constant_nodes_get_nothing() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let unused = g.leaf(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(unused).is_none());
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn loss_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));

        let mut other = Graph::<f64>::new();
        let y = other.leaf(t(&[1], &[1.0]));
        assert!(matches!(g.backward(y), Err(Error::DetachedTensor(_))));
    }

    #[test]
    fn inference_mode_records_nothing() {
        let mut g = Graph::<f64>::inference();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, -1.0, 2.0, 0.0]));
        let r = g.relu(x).unwrap();
        let p = g.global_avg_pool(r).unwrap();
        let s = g.sum(p).unwrap();
        assert_eq!(g.tape_len(), 0);
        assert_eq!(g.value(s).unwrap().data(), &[0.75]);
        assert!(matches!(g.backward(s), Err(Error::InferenceGraph)));
    }

    #[test]
    fn tape_is_in_recording_order() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(s).unwrap();
        let _ = g.sum(r).unwrap();
        assert_eq!(g.tape_ops(), vec![OpKind::Sigmoid, OpKind::Relu, OpKind::Sum]);
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Tensor::from_fn(vec![2, 3, 5, 5], |i| ((i * 31 % 17) as f32 - 8.0) / 7.0).unwrap());
            let w = g.leaf(Tensor::from_fn(vec![4, 3, 3, 3], |i| ((i * 13 % 11) as f32 - 5.0) / 9.0).unwrap());
            let y = g.conv2d(x, w, None, ConvGeometry::new(1, 1, 1)).unwrap();
            let s = g.sigmoid(y).unwrap();
            let l = g.sum(s).unwrap();
            let grads = g.backward(l).unwrap();
            (grads.get(x).unwrap().to_vec(), grads.get(w).unwrap().to_vec())
        };
        let (a, b) = (build(), build());
        assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn fault_injection_scales_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let s = g.scale(x, 3.0).unwrap();
        let l = g.sum(s).unwrap();
        g.inject_backward_fault(OpKind::Scale, 2.0);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn pinned_relu_follows_recorded_mask() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -1.0, 0.5]));
        g.relu(x).unwrap();
        let pattern = g.branch_pattern();

        let mut h = Graph::new();
        h.pin_branches(pattern);
        let x = h.leaf(t(&[3], &[-2.0, 3.0, 0.25]));
        let y = h.relu(x).unwrap();
        assert_eq!(h.value(y).unwrap().data(), &[-2.0, 0.0, 0.25]);
        let s = h.sum(y).unwrap();
        assert_eq!(h.backward(s).unwrap().get(x).unwrap(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn pinned_max_pool_keeps_winners() {
        let geo = MaxPoolGeometry { kernel: 2, stride: 2, padding: 0 };
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[4.0, 1.0, 2.0, 3.0]));
        g.max_pool(x, geo).unwrap();
        let pattern = g.branch_pattern();
        assert_eq!(pattern.max_pool, vec![vec![0]]);

        let mut h = Graph::new();
        h.pin_branches(pattern);
        let x = h.leaf(t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let y = h.max_pool(x, geo).unwrap();
        assert_eq!(h.value(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn pinned_pattern_must_cover_graph() {
        let mut g = Graph::new();
        g.pin_branches(BranchPattern::default());
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(g.relu(x).is_err());
    }
}
