//! Reverse-mode automatic differentiation over rank-4 tensors.
//!
//! A `Graph` is an append-only list of eagerly evaluated operation nodes;
//! node inputs always precede the node, so the list order is a topological
//! order. `backward` walks it in reverse from a scalar loss node,
//! accumulating gradients in a fixed order so results are bit-reproducible.
//!
//! Forward and backward on one graph are single-threaded by contract;
//! independent graphs may run concurrently.

use crate::error::{Error, Result};
use crate::losses::{dice_loss, embedding_loss, LossConfig};
use crate::sampler::{mask_gradients, Adjacency, EmbeddingSample, Position};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        pad: usize,
        stride: usize,
    },
    Relu,
    Sigmoid,
    /// 2x2 max pooling, stride 2. `argmax` caches, per output element (in
    /// output data order), the flat index of the winning input pixel within
    /// its (item, channel) plane; ties go to the first index in scan order.
    MaxPool2 {
        argmax: Vec<u32>,
    },
    /// Nearest-neighbor 2x upsampling.
    Upsample2,
    ConcatChannels,
    SliceBatch {
        start: usize,
    },
    Add,
    Mul,
    Scale {
        factor: T,
    },
    Sum,
    Mean,
    /// Soft Dice loss against fixed labels; gradient cached at forward.
    Dice {
        grad: Tensor<T>,
    },
    /// Pairwise embedding loss over sampled pixels; per-sample gradients are
    /// cached at forward and scattered back through `mask_gradients`, so
    /// only the sampled pixels propagate gradient.
    Embedding {
        positions: Vec<Position>,
        grads: Vec<Vec<T>>,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives a gradient but is not listed as a parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Trainable input; `backward` reports gradients for all parameters in
    /// registration order (zeros when unreachable from the loss).
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf, vec![], value);
        self.params.push(id);
        id
    }

    /// 2D convolution. Weights are laid out `kh x kw x in_ch x out_ch`, the
    /// bias is an `1 x 1 x out_ch x 1` tensor added per output channel.
    pub fn conv2d(&mut self, x: NodeId, weights: NodeId, bias: NodeId, pad: usize, stride: usize) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let value = conv2d_forward(self.value(x), self.value(weights), self.value(bias), pad, stride)?;
        Ok(self.push(Op::Conv2d { pad, stride }, vec![x, weights, bias], value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu, vec![x], value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let value = self.value(x).map(|v| one / (one + (-v).exp()));
        self.push(Op::Sigmoid, vec![x], value)
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (h, w, c, n) = xv.dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", "even spatial dims", xv.dims_str()));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(oh, ow, c, n);
        let mut argmax = vec![0u32; out.len()];
        for bi in 0..n {
            for ch in 0..c {
                let plane = xv.plane(bi, ch);
                let base = (bi * c + ch) * oh * ow;
                for orow in 0..oh {
                    for ocol in 0..ow {
                        let mut best_idx = (2 * orow) * w + 2 * ocol;
                        let mut best = plane[best_idx];
                        for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * orow + dr) * w + 2 * ocol + dc;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                        let o = base + orow * ow + ocol;
                        out.data_mut()[o] = best;
                        argmax[o] = best_idx as u32;
                    }
                }
            }
        }
        Ok(self.push(Op::MaxPool2 { argmax }, vec![x], out))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (h, w, c, n) = xv.dims();
        let mut out = Tensor::zeros(2 * h, 2 * w, c, n);
        for bi in 0..n {
            for ch in 0..c {
                let (src, dst_w) = (xv.plane(bi, ch), 2 * w);
                let dst = out.plane_mut(bi, ch);
                for r in 0..h {
                    for col in 0..w {
                        let v = src[r * w + col];
                        let r2 = 2 * r;
                        let c2 = 2 * col;
                        dst[r2 * dst_w + c2] = v;
                        dst[r2 * dst_w + c2 + 1] = v;
                        dst[(r2 + 1) * dst_w + c2] = v;
                        dst[(r2 + 1) * dst_w + c2 + 1] = v;
                    }
                }
            }
        }
        self.push(Op::Upsample2, vec![x], out)
    }

    /// Channel concatenation of two tensors with equal H, W and batch.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let (h, w, ca, n) = av.dims();
        if (bv.h(), bv.w(), bv.n()) != (h, w, n) {
            return Err(Error::shape("concat_channels", av.dims_str(), bv.dims_str()));
        }
        let cb = bv.c();
        let mut out = Tensor::zeros(h, w, ca + cb, n);
        for bi in 0..n {
            for ch in 0..ca {
                out.plane_mut(bi, ch).copy_from_slice(av.plane(bi, ch));
            }
            for ch in 0..cb {
                out.plane_mut(bi, ca + ch).copy_from_slice(bv.plane(bi, ch));
            }
        }
        Ok(self.push(Op::ConcatChannels, vec![a, b], out))
    }

    /// A contiguous run of batch items.
    pub fn slice_batch(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = self.value(x).slice_batch(start, len)?;
        Ok(self.push(Op::SliceBatch { start }, vec![x], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if !av.same_shape(bv) {
            return Err(Error::shape("mul", av.dims_str(), bv.dims_str()));
        }
        let mut value = av.clone();
        for (v, &y) in value.data_mut().iter_mut().zip(bv.data()) {
            *v = *v * y;
        }
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { factor }, vec![x], value)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], value)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::from_f64(xv.len() as f64));
        self.push(Op::Mean, vec![x], value)
    }

    /// Soft Dice loss node. `labels` is a fixed binary tensor, not a graph
    /// input; the gradient flows into `probs` only.
    pub fn dice(&mut self, probs: NodeId, labels: &Tensor<T>, eps: T) -> Result<NodeId> {
        let (loss, grad) = dice_loss(self.value(probs), labels, eps)?;
        Ok(self.push(Op::Dice { grad }, vec![probs], Tensor::scalar(loss)))
    }

    /// Pairwise embedding loss over sampled pixels of a feature map.
    ///
    /// `prior_labels[i]` is the class the prior assigns to `positions[i]`;
    /// `adjacency` must agree with the sample count. Only `config.margin`,
    /// `config.metric` and `config.epsilon` are used here; the lambda weight
    /// is applied by the caller (e.g. through `scale`).
    pub fn embedding(
        &mut self,
        embed: NodeId,
        positions: Vec<Position>,
        prior_labels: Vec<u8>,
        adjacency: &Adjacency,
        config: &LossConfig,
    ) -> Result<NodeId> {
        if positions.len() != prior_labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} positions but {} prior labels",
                positions.len(),
                prior_labels.len()
            )));
        }
        let ev = self.value(embed);
        let (h, w, c, n) = ev.dims();
        let mut samples = Vec::with_capacity(positions.len());
        for (&p, &label) in positions.iter().zip(&prior_labels) {
            if p.row >= h || p.col >= w || p.batch >= n {
                return Err(Error::InvalidArgument(format!(
                    "position (batch {}, row {}, col {}) out of bounds for {}",
                    p.batch,
                    p.row,
                    p.col,
                    ev.dims_str()
                )));
            }
            let vector = (0..c).map(|ch| ev.get(p.row, p.col, ch, p.batch)).collect();
            samples.push(EmbeddingSample {
                position: p,
                vector,
                prior_label: label,
            });
        }
        let (loss, grads) = embedding_loss(&samples, adjacency, config)?;
        Ok(self.push(Op::Embedding { positions, grads }, vec![embed], Tensor::scalar(loss)))
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// parameters unreachable from the loss get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::shape("backward loss node", "scalar (1x1x1x1)", loss_value.dims_str()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let (before, rest) = grads.split_at_mut(id);
            let Some(g) = rest[0].as_ref() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { pad, stride } => {
                    let x = self.value(node.inputs[0]);
                    let w = self.value(node.inputs[1]);
                    let (dx, dw, db) = conv2d_backward(x, w, g, *pad, *stride);
                    accumulate(&mut before[node.inputs[0].0], dx);
                    accumulate(&mut before[node.inputs[1].0], dw);
                    accumulate(&mut before[node.inputs[2].0], db);
                }
                Op::Relu => {
                    let x = self.value(node.inputs[0]);
                    let mut dx = x.zeros_like();
                    for ((d, &xv), &gv) in dx.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
                        if xv > T::zero() {
                            *d = gv;
                        }
                    }
                    accumulate(&mut before[node.inputs[0].0], dx);
                }
                Op::Sigmoid => {
                    let s = &node.value;
                    let one = T::one();
                    let mut dx = s.zeros_like();
                    for ((d, &sv), &gv) in dx.data_mut().iter_mut().zip(s.data()).zip(g.data()) {
                        *d = sv * (one - sv) * gv;
                    }
                    accumulate(&mut before[node.inputs[0].0], dx);
                }
                Op::MaxPool2 { argmax } => {
                    let x = self.value(node.inputs[0]);
                    let (oh, ow, c, n) = node.value.dims();
                    let mut dx = x.zeros_like();
                    let plane_len = x.h() * x.w();
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * oh * ow;
                            let dst_base = (bi * c + ch) * plane_len;
                            for o in 0..oh * ow {
                                let src = argmax[base + o] as usize;
                                let d = &mut dx.data_mut()[dst_base + src];
                                *d = *d + g.data()[base + o];
                            }
                        }
                    }
                    accumulate(&mut before[node.inputs[0].0], dx);
                }
                Op::Upsample2 => {
                    let x = self.value(node.inputs[0]);
                    let (h, w, c, n) = x.dims();
                    let mut dx = x.zeros_like();
                    for bi in 0..n {
                        for ch in 0..c {
                            let gp = g.plane(bi, ch);
                            let dp = dx.plane_mut(bi, ch);
                            let gw = 2 * w;
                            for r in 0..h {
                                for col in 0..w {
                                    let r2 = 2 * r;
                                    let c2 = 2 * col;
                                    dp[r * w + col] = gp[r2 * gw + c2]
                                        + gp[r2 * gw + c2 + 1]
                                        + gp[(r2 + 1) * gw + c2]
                                        + gp[(r2 + 1) * gw + c2 + 1];
                                }
                            }
                        }
                    }
                    accumulate(&mut before[node.inputs[0].0], dx);
                }
                Op::ConcatChannels => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    let (h, w, ca, n) = a.dims();
                    let cb = b.c();
                    let mut da = a.zeros_like();
                    let mut db = b.zeros_like();
                    for bi in 0..n {
                        for ch in 0..ca {
                            da.plane_mut(bi, ch).copy_from_slice(g.plane(bi, ch));
                        }
                        for ch in 0..cb {
                            db.plane_mut(bi, ch).copy_from_slice(g.plane(bi, ca + ch));
                        }
                    }
                    let _ = (h, w);
                    accumulate(&mut before[node.inputs[0].0], da);
                    accumulate(&mut before[node.inputs[1].0], db);
                }
                Op::SliceBatch { start } => {
                    let x = self.value(node.inputs[0]);
                    let mut dx = x.zeros_like();
                    let per_item = x.h() * x.w() * x.c();
                    let off = start * per_item;
                    dx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                    accumulate(&mut before[node.inputs[0].0], dx);
                }
                Op::Add => {
                    accumulate(&mut before[node.inputs[0].0], g.clone());
                    accumulate(&mut before[node.inputs[1].0], g.clone());
                }
                Op::Mul => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    let mut da = b.clone();
                    for (d, &gv) in da.data_mut().iter_mut().zip(g.data()) {
                        *d = *d * gv;
                    }
                    let mut db = a.clone();
                    for (d, &gv) in db.data_mut().iter_mut().zip(g.data()) {
                        *d = *d * gv;
                    }
                    accumulate(&mut before[node.inputs[0].0], da);
                    accumulate(&mut before[node.inputs[1].0], db);
                }
                Op::Scale { factor } => {
                    let dx = g.map(|v| v * *factor);
                    accumulate(&mut before[node.inputs[0].0], dx);
                }
                Op::Sum => {
                    let x = self.value(node.inputs[0]);
                    let gv = g.data()[0];
                    accumulate(&mut before[node.inputs[0].0], Tensor::filled(x.h(), x.w(), x.c(), x.n(), gv));
                }
                Op::Mean => {
                    let x = self.value(node.inputs[0]);
                    let gv = g.data()[0] / T::from_f64(x.len() as f64);
                    accumulate(&mut before[node.inputs[0].0], Tensor::filled(x.h(), x.w(), x.c(), x.n(), gv));
                }
                Op::Dice { grad } => {
                    let gv = g.data()[0];
                    let dx = grad.map(|v| v * gv);
                    accumulate(&mut before[node.inputs[0].0], dx);
                }
                Op::Embedding { positions, grads: sample_grads } => {
                    let embed = self.value(node.inputs[0]);
                    let mut dx = mask_gradients(embed, positions, sample_grads)?;
                    dx.scale_assign(g.data()[0]);
                    accumulate(&mut before[node.inputs[0].0], dx);
                }
            }
        }
        Ok(Gradients { node_grads: grads })
    }
}

pub struct Gradients<T: Scalar> {
    node_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.node_grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// One gradient per registered parameter, in registration order;
    /// parameters the loss does not reach get zeros of the right shape.
    pub fn params(&self, graph: &Graph<T>) -> Vec<Tensor<T>> {
        graph
            .params
            .iter()
            .map(|&id| match self.node(id) {
                Some(t) => t.clone(),
                None => graph.value(id).zeros_like(),
            })
            .collect()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        Some(existing) => {
            existing
                .add_assign(&contribution)
                .expect("gradient contributions must share a shape");
        }
        None => *slot = Some(contribution),
    }
}

/// Plain SGD update: `p <- p - lr * g`, elementwise.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if !p.same_shape(g) {
            return Err(Error::shape("sgd_step", p.dims_str(), g.dims_str()));
        }
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv = *pv - lr * gv;
        }
    }
    Ok(())
}

/// Dot product accumulated in 8 fixed lanes, then folded in lane order.
/// The lane structure lets the autovectorizer keep up without fast-math
/// while the summation order stays fixed and bit-reproducible.
#[inline]
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut lanes = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        for l in 0..LANES {
            let k = i * LANES + l;
            lanes[l] = lanes[l] + a[k] * b[k];
        }
    }
    let mut acc = T::zero();
    for l in lanes {
        acc = acc + l;
    }
    for k in chunks * LANES..a.len() {
        acc = acc + a[k] * b[k];
    }
    acc
}

fn conv_out_dim(in_dim: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = in_dim + 2 * pad;
    if padded < k {
        return Err(Error::InvalidArgument(format!(
            "kernel {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output index range [lo, hi) with `o*stride + k_off - pad` inside `[0, in_dim)`.
#[inline]
fn conv_range(k_off: usize, pad: usize, stride: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let max_in = in_dim - 1 + pad;
    if max_in < k_off {
        return (0, 0);
    }
    let hi = ((max_in - k_off) / stride + 1).min(out_dim);
    (lo.min(hi), hi)
}

/// Lowers one batch item to a `(cin*kh*kw) x (oh*ow)` column matrix so the
/// convolution becomes long contiguous multiply-accumulates. Row `k`
/// corresponds to `(ic, kr, kc)` in the weight-tensor order, so the weight
/// vector of one output channel is a contiguous slice.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    bi: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let (h, iw, cin, _) = x.dims();
    let npix = oh * ow;
    let mut col = vec![T::zero(); cin * kh * kw * npix];
    for ic in 0..cin {
        let plane = x.plane(bi, ic);
        for kr in 0..kh {
            let (rlo, rhi) = conv_range(kr, pad, stride, h, oh);
            for kc in 0..kw {
                let (clo, chi) = conv_range(kc, pad, stride, iw, ow);
                if clo >= chi {
                    continue;
                }
                let k = (ic * kh + kr) * kw + kc;
                let row = &mut col[k * npix..(k + 1) * npix];
                for orow in rlo..rhi {
                    let ir = orow * stride + kr - pad;
                    if stride == 1 {
                        let ioff = clo + kc - pad;
                        row[orow * ow + clo..orow * ow + chi].copy_from_slice(&plane[ir * iw + ioff..ir * iw + ioff + (chi - clo)]);
                    } else {
                        for ocol in clo..chi {
                            row[orow * ow + ocol] = plane[ir * iw + ocol * stride + kc - pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column-matrix gradient back onto the input plane grid
/// (the adjoint of `im2col`).
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    dcol: &[T],
    dx: &mut Tensor<T>,
    bi: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let (h, iw, cin, _) = dx.dims();
    let npix = oh * ow;
    for ic in 0..cin {
        let plane = dx.plane_mut(bi, ic);
        for kr in 0..kh {
            let (rlo, rhi) = conv_range(kr, pad, stride, h, oh);
            for kc in 0..kw {
                let (clo, chi) = conv_range(kc, pad, stride, iw, ow);
                if clo >= chi {
                    continue;
                }
                let k = (ic * kh + kr) * kw + kc;
                let row = &dcol[k * npix..(k + 1) * npix];
                for orow in rlo..rhi {
                    let ir = orow * stride + kr - pad;
                    if stride == 1 {
                        let ioff = clo + kc - pad;
                        let dst = &mut plane[ir * iw + ioff..ir * iw + ioff + (chi - clo)];
                        for (d, &v) in dst.iter_mut().zip(&row[orow * ow + clo..orow * ow + chi]) {
                            *d = *d + v;
                        }
                    } else {
                        for ocol in clo..chi {
                            let i = ir * iw + ocol * stride + kc - pad;
                            plane[i] = plane[i] + row[orow * ow + ocol];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (h, iw, cin, n) = x.dims();
    let (kh, kw, wcin, cout) = w.dims();
    if wcin != cin {
        return Err(Error::shape(
            "conv2d input channels",
            format!("weights with {cin} input channels (input is {})", x.dims_str()),
            format!("weights {}", w.dims_str()),
        ));
    }
    if b.dims() != (1, 1, cout, 1) {
        return Err(Error::shape("conv2d bias", format!("1x1x{cout}x1"), b.dims_str()));
    }
    let oh = conv_out_dim(h, kh, pad, stride)?;
    let ow = conv_out_dim(iw, kw, pad, stride)?;
    let npix = oh * ow;
    let k_total = cin * kh * kw;
    let mut out = Tensor::zeros(oh, ow, cout, n);
    for bi in 0..n {
        let col = im2col(x, bi, kh, kw, pad, stride, oh, ow);
        for oc in 0..cout {
            let out_plane = out.plane_mut(bi, oc);
            out_plane.fill(b.data()[oc]);
            let w_vec = &w.data()[oc * k_total..(oc + 1) * k_total];
            for (k, &coef) in w_vec.iter().enumerate() {
                let row = &col[k * npix..(k + 1) * npix];
                for (o, &v) in out_plane.iter_mut().zip(row) {
                    *o = *o + coef * v;
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (_, _, cin, n) = x.dims();
    let (kh, kw, _, cout) = w.dims();
    let (oh, ow, _, _) = gout.dims();
    let npix = oh * ow;
    let k_total = cin * kh * kw;
    let mut dx = x.zeros_like();
    let mut dw = w.zeros_like();
    let mut db = Tensor::zeros(1, 1, cout, 1);
    let mut dcol = vec![T::zero(); k_total * npix];
    for bi in 0..n {
        let col = im2col(x, bi, kh, kw, pad, stride, oh, ow);
        dcol.fill(T::zero());
        for oc in 0..cout {
            let g_plane = gout.plane(bi, oc);
            let mut bias_acc = T::zero();
            for &gv in g_plane {
                bias_acc = bias_acc + gv;
            }
            db.data_mut()[oc] = db.data()[oc] + bias_acc;
            let w_vec = &w.data()[oc * k_total..(oc + 1) * k_total];
            let dw_vec = &mut dw.data_mut()[oc * k_total..(oc + 1) * k_total];
            for k in 0..k_total {
                let row = &col[k * npix..(k + 1) * npix];
                dw_vec[k] = dw_vec[k] + dot_lanes(g_plane, row);
                let coef = w_vec[k];
                let drow = &mut dcol[k * npix..(k + 1) * npix];
                for (d, &gv) in drow.iter_mut().zip(g_plane) {
                    *d = *d + coef * gv;
                }
            }
        }
        col2im_add(&dcol, &mut dx, bi, kh, kw, pad, stride, oh, ow);
    }
    (dx, dw, db)
}
