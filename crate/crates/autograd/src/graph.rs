//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: the forward value is computed
//! at call time and stored on the tape together with whatever the backward
//! rule needs. [`Graph::backward`] walks the tape in reverse once.

use crate::conv::{self, ConvGeometry, ConvShape};
use crate::error::{Result, TensorError};
use crate::par;
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics observed by a batch-statistics normalization call,
/// reported so the owning layer can update its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub tag: usize,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Which statistics a normalization call uses.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Statistics of the current batch; reported back under `tag`.
    Batch { tag: usize },
    /// Frozen running statistics.
    Fixed { mean: &'a [T], var: &'a [T] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// A differentiable operation defined outside the engine.
///
/// The caller computes the forward value; `backward` returns one optional
/// gradient per input (in input order).
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, inv_std: Vec<T>, batch: bool },
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Clamp { x: NodeId, lo: T, hi: T },
    ConcatChannels(Vec<NodeId>),
    Reshape(NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    AvgPool2(NodeId),
    GlobalAvgPool(NodeId),
    Upsample2(NodeId),
    ChannelAffine { x: NodeId, scale: Vec<T> },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<T>, reduction: Reduction },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    stats: Vec<BatchStats<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), stats: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Multiply-accumulates spent in forward convolutions and linear layers.
    pub fn forward_macs(&self) -> u64 {
        self.macs
    }

    /// Drains the batch statistics recorded by normalization calls.
    pub fn take_batch_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.stats)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        let s = ConvShape::infer(self.shape(x), self.shape(w), geom)?;
        if let Some(b) = b {
            if self.value(b).len() != s.out_c {
                return Err(TensorError::Geometry(format!(
                    "conv2d bias length {} != {}",
                    self.value(b).len(),
                    s.out_c
                )));
            }
        }
        let out = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &s);
        let value = Tensor::new(&s.output_shape(), out)?;
        self.macs += (s.batch * s.out_c * s.out_h * s.out_w * s.in_c * s.k_h * s.k_w) as u64;
        let needs = self.any_grad(&[x, w]) || b.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// Per-channel normalization of an NCHW tensor followed by `gamma·x̂ + beta`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(TensorError::Geometry(format!("batch_norm affine parameters must have {c} entries")));
        }
        let plane = h * w;
        let count = b * plane;
        let xv = self.nodes[x.0].value.data();
        let mut observed = None;
        let (mean, inv_std, is_batch) = match stats {
            NormStats::Batch { tag } => {
                if count < 2 {
                    return Err(TensorError::Geometry("batch statistics need at least two values per channel".into()));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for n in 0..b {
                        s += xv[(n * c + ch) * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0f64;
                    for n in 0..b {
                        ss += xv[(n * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| {
                                let d = v.as_f64() - m;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = T::from_f64(m);
                    var[ch] = T::from_f64(ss / count as f64);
                }
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let unbiased_scale = T::from_f64(count as f64 / (count - 1) as f64);
                observed = Some(BatchStats {
                    tag,
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbiased_scale).collect(),
                });
                (mean, inv, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::Geometry(format!("running statistics must have {c} entries")));
                }
                (mean.to_vec(), var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(), false)
            }
        };
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        par::for_each_chunk_mut(&mut out, plane, |i, o| {
            let ch = i % c;
            let (m, s, g, bb) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            for (d, &v) in o.iter_mut().zip(&xv[i * plane..(i + 1) * plane]) {
                *d = (v - m) * s * g + bb;
            }
        });
        let value = Tensor::new(self.shape(x), out)?;
        self.stats.extend(observed);
        let needs = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch: is_batch }, needs))
    }

    fn unary(&mut self, x: NodeId, op: Op<T>, f: impl Fn(T) -> T) -> NodeId {
        let value = self.value(x).map(f);
        let needs = self.needs_grad(x);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        self.unary(x, Op::LeakyRelu(x, slope), move |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        self.unary(x, Op::Scale(x, k), move |v| v * k)
    }

    pub fn add_scalar(&mut self, x: NodeId, k: T) -> NodeId {
        self.unary(x, Op::AddScalar(x), move |v| v + k)
    }

    /// Elementwise `min(max(x, lo), hi)`. The gradient passes where
    /// `lo <= x <= hi` and is zero elsewhere.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        self.unary(x, Op::Clamp { x, lo, hi }, move |v| v.max(lo).min(hi))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (b, _, h, w) = self.value(*parts.first().ok_or(TensorError::Empty)?).dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pb, pc, ph, pw) = self.value(p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(TensorError::ShapeMismatch {
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for n in 0..b {
            for (&p, &pc) in parts.iter().zip(&channels) {
                out.extend_from_slice(&self.value(p).data()[n * pc * plane..(n + 1) * pc * plane]);
            }
        }
        let value = Tensor::new(&[b, total, h, w], out)?;
        let needs = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// `x·wᵀ + b` for `x: (B, in)`, `w: (out, in)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (batch, inp) = self.value(x).dims2()?;
        let (out_f, w_in) = self.value(w).dims2()?;
        if w_in != inp {
            return Err(TensorError::ShapeMismatch { left: self.shape(x).to_vec(), right: self.shape(w).to_vec() });
        }
        let mut out = vec![T::zero(); batch * out_f];
        matmul(batch, inp, out_f, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != out_f {
                return Err(TensorError::Geometry(format!("linear bias length {} != {out_f}", bv.len())));
            }
            for row in out.chunks_mut(out_f) {
                row.iter_mut().zip(bv).for_each(|(o, &v)| *o += v);
            }
        }
        let value = Tensor::new(&[batch, out_f], out)?;
        self.macs += (batch * inp * out_f) as u64;
        let needs = self.any_grad(&[x, w]) || b.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, needs))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::from_f64(0.25);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = base + 2 * oy * w + 2 * ox;
                    out.push((xv[i] + xv[i + 1] + xv[i + w] + xv[i + w + 1]) * quarter);
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::AvgPool2(x), needs))
    }

    /// Mean over the spatial axes: `(B, C, H, W) -> (B, C)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let out: Vec<T> = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(&[b, c], out)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), needs))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for plane in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[plane * 4 * h * w + y * 2 * w + xx] = xv[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[b, c, 2 * h, 2 * w], out)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::Upsample2(x), needs))
    }

    /// `x[:, c] * scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: NodeId, scale: &[T], shift: &[T]) -> Result<NodeId> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if scale.len() != c || shift.len() != c {
            return Err(TensorError::Geometry(format!("channel_affine needs {c} coefficients")));
        }
        let plane = h * w;
        let mut value = self.value(x).clone();
        for (i, p) in value.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            p.iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
        }
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::ChannelAffine { x, scale: scale.to_vec() }, needs))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = T::from_f64(self.value(x).sum_f64());
        let needs = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = T::from_f64(v.sum_f64() / v.len().max(1) as f64);
        let needs = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Softmax cross-entropy of `(B, K)` logits against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], reduction: Reduction) -> Result<NodeId> {
        let (b, k) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(TensorError::Geometry(format!("{} targets for batch of {b}", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Geometry(format!("target class {t} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut total = 0.0f64;
        for (n, row) in lv.chunks(k).enumerate() {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut z = T::zero();
            for (p, &v) in probs[n * k..(n + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            probs[n * k..(n + 1) * k].iter_mut().for_each(|p| *p = *p / z);
            total += (m + z.ln() - row[targets[n]]).as_f64();
        }
        if reduction == Reduction::Mean {
            total /= b as f64;
        }
        let needs = self.needs_grad(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(total)),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, reduction },
            needs,
        ))
    }

    /// Records a caller-defined operation whose forward value is `value`.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> NodeId {
        let needs = self.any_grad(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, needs)
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Geometry(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, dy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, dy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let s = ConvShape::infer(self.shape(*x), self.shape(*w), *geom)?;
                if self.needs_grad(*x) {
                    let dx = conv::conv2d_backward_input(dy.data(), self.value(*w).data(), &s);
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.needs_grad(*w) {
                    let dw = conv::conv2d_backward_weight(dy.data(), self.value(*x).data(), &s);
                    accumulate(grads, *w, Tensor::new(self.shape(*w), dw)?);
                }
                if let Some(b) = b.filter(|&b| self.needs_grad(b)) {
                    let db = conv::conv2d_backward_bias(dy.data(), &s);
                    accumulate(grads, b, Tensor::new(self.shape(b), db)?);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch } => {
                let (nb, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let count = (nb * plane) as f64;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let d = dy.data();
                // Per-channel Σdy and Σdy·x̂.
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for i in 0..nb * c {
                    let ch = i % c;
                    let (m, s) = (mean[ch], inv_std[ch]);
                    for (&dv, &xv) in d[i * plane..(i + 1) * plane].iter().zip(&xv[i * plane..(i + 1) * plane]) {
                        sum_dy[ch] += dv.as_f64();
                        sum_dy_xhat[ch] += (dv * (xv - m) * s).as_f64();
                    }
                }
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    par::for_each_chunk_mut(&mut dx, plane, |i, o| {
                        let ch = i % c;
                        let (m, s, g) = (mean[ch], inv_std[ch], gv[ch]);
                        let src = &xv[i * plane..(i + 1) * plane];
                        let dsrc = &d[i * plane..(i + 1) * plane];
                        if *batch {
                            let a = T::from_f64(sum_dy[ch] / count);
                            let bq = T::from_f64(sum_dy_xhat[ch] / count);
                            for ((o, &dv), &xv) in o.iter_mut().zip(dsrc).zip(src) {
                                let xh = (xv - m) * s;
                                *o = g * s * (dv - a - xh * bq);
                            }
                        } else {
                            for (o, &dv) in o.iter_mut().zip(dsrc) {
                                *o = dv * g * s;
                            }
                        }
                    });
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.needs_grad(*gamma) {
                    let t = sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect();
                    accumulate(grads, *gamma, Tensor::new(self.shape(*gamma), t)?);
                }
                if self.needs_grad(*beta) {
                    let t = sum_dy.iter().map(|&v| T::from_f64(v)).collect();
                    accumulate(grads, *beta, Tensor::new(self.shape(*beta), t)?);
                }
            }
            Op::Relu(x) => {
                let g = dy.zip_map(y, |d, v| if v > T::zero() { d } else { T::zero() })?;
                accumulate(grads, *x, g);
            }
            Op::LeakyRelu(x, slope) => {
                let g = dy.zip_map(self.value(*x), |d, v| if v > T::zero() { d } else { d * *slope })?;
                accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = dy.zip_map(y, |d, s| d * s * (T::one() - s))?;
                accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let g = dy.zip_map(y, |d, t| d * (T::one() - t * t))?;
                accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                if self.needs_grad(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.needs_grad(*b) {
                    accumulate(grads, *b, dy);
                }
            }
            Op::Sub(a, b) => {
                if self.needs_grad(*b) {
                    accumulate(grads, *b, dy.map(|v| -v));
                }
                if self.needs_grad(*a) {
                    accumulate(grads, *a, dy);
                }
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    accumulate(grads, *a, dy.zip_map(self.value(*b), |d, v| d * v)?);
                }
                if self.needs_grad(*b) {
                    accumulate(grads, *b, dy.zip_map(self.value(*a), |d, v| d * v)?);
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, dy.map(|v| v * *k)),
            Op::AddScalar(x) => accumulate(grads, *x, dy),
            Op::Clamp { x, lo, hi } => {
                let g = dy.zip_map(self.value(*x), |d, v| if v >= *lo && v <= *hi { d } else { T::zero() })?;
                accumulate(grads, *x, g);
            }
            Op::ConcatChannels(parts) => {
                let (b, total, h, w) = y.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs_grad(p) {
                        let mut g = Vec::with_capacity(b * pc * plane);
                        for n in 0..b {
                            let start = (n * total + offset) * plane;
                            g.extend_from_slice(&dy.data()[start..start + pc * plane]);
                        }
                        accumulate(grads, p, Tensor::new(self.shape(p), g)?);
                    }
                    offset += pc;
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, dy.reshape(self.shape(*x))?),
            Op::Linear { x, w, b } => {
                let (batch, inp) = self.value(*x).dims2()?;
                let out_f = y.shape()[1];
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); batch * inp];
                    matmul(batch, out_f, inp, dy.data(), false, self.value(*w).data(), false, &mut dx, false);
                    accumulate(grads, *x, Tensor::new(&[batch, inp], dx)?);
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![T::zero(); out_f * inp];
                    matmul(out_f, batch, inp, dy.data(), true, self.value(*x).data(), false, &mut dw, false);
                    accumulate(grads, *w, Tensor::new(&[out_f, inp], dw)?);
                }
                if let Some(b) = b.filter(|&b| self.needs_grad(b)) {
                    let mut db = vec![T::zero(); out_f];
                    for row in dy.data().chunks(out_f) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    accumulate(grads, b, Tensor::new(self.shape(b), db)?);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut g = Tensor::zeros(self.shape(*x));
                let gd = g.data_mut();
                for (&idx, &d) in argmax.iter().zip(dy.data()) {
                    gd[idx as usize] += d;
                }
                accumulate(grads, *x, g);
            }
            Op::AvgPool2(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut g = Tensor::zeros(self.shape(*x));
                let gd = g.data_mut();
                for (plane, dp) in dy.data().chunks(oh * ow).enumerate() {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = dp[oy * ow + ox] * quarter;
                            let i = base + 2 * oy * w + 2 * ox;
                            gd[i] += v;
                            gd[i + 1] += v;
                            gd[i + w] += v;
                            gd[i + w + 1] += v;
                        }
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut g = Tensor::zeros(self.shape(*x));
                for (p, &d) in g.data_mut().chunks_mut(h * w).zip(dy.data()) {
                    p.fill(d * inv);
                }
                accumulate(grads, *x, g);
            }
            Op::Upsample2(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let mut g = Tensor::zeros(self.shape(*x));
                let gd = g.data_mut();
                for (plane, dp) in dy.data().chunks(4 * h * w).enumerate() {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            gd[plane * h * w + (yy / 2) * w + xx / 2] += dp[yy * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::ChannelAffine { x, scale } => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let mut g = dy;
                for (i, p) in g.data_mut().chunks_mut(h * w).enumerate() {
                    let s = scale[i % c];
                    p.iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, *x, g);
            }
            Op::Sum(x) => accumulate(grads, *x, Tensor::full(self.shape(*x), dy.item())),
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1);
                accumulate(grads, *x, Tensor::full(self.shape(*x), dy.item() / T::from_f64(n as f64)));
            }
            Op::CrossEntropy { logits, targets, probs, reduction } => {
                let (b, k) = self.value(*logits).dims2()?;
                let mut scale = dy.item();
                if *reduction == Reduction::Mean {
                    scale = scale / T::from_f64(b as f64);
                }
                let mut g = probs.clone();
                for (n, &t) in targets.iter().enumerate() {
                    g[n * k + t] -= T::one();
                }
                g.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, Tensor::new(&[b, k], g)?);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = op.backward(&vals, y, &dy);
                for (&i, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g.filter(|_| self.needs_grad(i)) {
                        g.same_shape(self.value(i))?;
                        accumulate(grads, i, g);
                    }
                }
            }
        }
        Ok(())
    }
}
