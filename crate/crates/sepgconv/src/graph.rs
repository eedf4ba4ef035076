//! Reverse-mode automatic differentiation over the kernels in
//! [`crate::ops`].
//!
//! Define-by-run tape: every method validates its inputs, computes the
//! forward value eagerly, and records whatever the backward rule needs
//! (argmax indices, dropout masks, normalized activations, softmax
//! probabilities). [`Graph::backward`] then walks the tape once in
//! reverse. Node ids are append-ordered, so reverse id order is a
//! topological order.
//!
//! The op set is closed: exactly the operations the layer zoo needs, no
//! general broadcasting. Filter construction (rotation gathers, pointwise
//! products) happens inside the tape so parameter gradients flow through
//! it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_forward, conv_geometry, corr2d_grad_input, corr2d_grad_kernel, dropout_mask,
    for_each_chunk_parallel, grouped_conv2d_batched, maxpool2x2_with_argmax, softmax_cross_entropy, Padding,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

enum Op<T: Scalar> {
    Leaf,
    /// Grouped batched convolution; `groups == 1` is the plain one.
    Conv {
        x: NodeId,
        f: NodeId,
        groups: usize,
        padding: Padding,
    },
    /// out.data[i] = src.data[map[i]] — source indices may repeat, the
    /// backward pass scatter-adds.
    Gather { src: NodeId, map: Vec<usize> },
    /// Same gather applied independently to every sample (axis 0).
    GatherPerSample { src: NodeId, map: Vec<usize> },
    Mul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// x [B,C,...] plus bias[C/repeat], bias index = channel / repeat.
    AddBias { x: NodeId, bias: NodeId, repeat: usize },
    Relu { x: NodeId },
    MaxPool2x2 { x: NodeId, argmax: Vec<usize> },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Tensor<T>,
        inv_std: Vec<T>,
    },
    /// Per-channel y = x*scale[c] + shift[c] with constant coefficients
    /// (inference-mode normalization).
    ChannelAffine { x: NodeId, scale: Vec<T> },
    /// Elementwise product with a saved 0-or-1/(1-p) mask.
    Dropout { x: NodeId, mask: Vec<T> },
    /// [B,C,G,H,W] -> [B,C,H,W], max over the group axis.
    CosetMaxPool { x: NodeId, argmax: Vec<usize> },
    /// [B,C,H,W] -> [B,C], max over both spatial axes.
    SpatialMax { x: NodeId, argmax: Vec<usize> },
    Reshape { x: NodeId },
    /// Mean cross-entropy after softmax; value is a rank-0 tensor.
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
    Sum { x: NodeId },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct Gradients<T: Scalar> {
    inner: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.inner.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.inner.get_mut(id).and_then(|g| g.take())
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Constant leaf: no gradient will be computed for it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf: `backward` produces a gradient entry for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn conv2d(&mut self, x: NodeId, f: NodeId, padding: Padding) -> Result<NodeId> {
        self.grouped_conv2d(x, f, 1, padding)
    }

    pub fn grouped_conv2d(&mut self, x: NodeId, f: NodeId, groups: usize, padding: Padding) -> Result<NodeId> {
        let y = grouped_conv2d_batched(&self.nodes[x].value, &self.nodes[f].value, groups, padding)?;
        let rg = self.rg(x) || self.rg(f);
        Ok(self.push(Op::Conv { x, f, groups, padding }, y, rg))
    }

    pub fn gather(&mut self, src: NodeId, map: Vec<usize>, out_shape: &[usize]) -> Result<NodeId> {
        let sv = &self.nodes[src].value;
        if out_shape.iter().product::<usize>() != map.len() {
            return Err(Error::shape(format!(
                "gather map has {} entries, output shape {:?} wants {}",
                map.len(),
                out_shape,
                out_shape.iter().product::<usize>()
            )));
        }
        if let Some(&bad) = map.iter().find(|&&i| i >= sv.numel()) {
            return Err(Error::invalid(format!("gather index {bad} out of range for {} elements", sv.numel())));
        }
        let data = map.iter().map(|&i| sv.data()[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(src);
        Ok(self.push(Op::Gather { src, map }, value, rg))
    }

    /// Apply one gather map to every sample of a batched tensor. The map
    /// indexes the flattened per-sample layout; `out_sample_shape` is the
    /// shape without the batch axis.
    pub fn gather_per_sample(&mut self, src: NodeId, map: Vec<usize>, out_sample_shape: &[usize]) -> Result<NodeId> {
        let sv = &self.nodes[src].value;
        if sv.rank() < 1 {
            return Err(Error::shape("gather_per_sample wants a batched tensor"));
        }
        let b = sv.shape()[0];
        let sample_len: usize = sv.shape()[1..].iter().product();
        let out_len: usize = out_sample_shape.iter().product();
        if out_len != map.len() {
            return Err(Error::shape(format!(
                "gather map has {} entries, per-sample shape {:?} wants {}",
                map.len(),
                out_sample_shape,
                out_len
            )));
        }
        if let Some(&bad) = map.iter().find(|&&i| i >= sample_len) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for per-sample length {sample_len}"
            )));
        }
        let mut shape = vec![b];
        shape.extend_from_slice(out_sample_shape);
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            let sd = sv.data();
            for bi in 0..b {
                let src_s = &sd[bi * sample_len..][..sample_len];
                let out_s = &mut od[bi * out_len..][..out_len];
                for (o, &i) in out_s.iter_mut().zip(&map) {
                    *o = src_s[i];
                }
            }
        }
        let rg = self.rg(src);
        Ok(self.push(Op::GatherPerSample { src, map }, out, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("mul on {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut y = va.clone();
        for (o, &v) in y.data_mut().iter_mut().zip(vb.data()) {
            *o = *o * v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul { a, b }, y, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("add on {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut y = va.clone();
        for (o, &v) in y.data_mut().iter_mut().zip(vb.data()) {
            *o = *o + v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b }, y, rg))
    }

    /// Add a per-channel bias to x [B,C,...]; channels c share bias slot
    /// c / repeat, so a bank of C_out*G channels can reuse C_out biases.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId, repeat: usize) -> Result<NodeId> {
        let (vx, vb) = (&self.nodes[x].value, &self.nodes[bias].value);
        if vx.rank() < 2 {
            return Err(Error::shape(format!("add_bias input needs rank >= 2, got {:?}", vx.shape())));
        }
        if repeat == 0 {
            return Err(Error::invalid("bias repeat factor must be positive"));
        }
        let c = vx.shape()[1];
        if c % repeat != 0 || vb.numel() != c / repeat {
            return Err(Error::shape(format!(
                "bias of {} entries with repeat {repeat} cannot cover {c} channels",
                vb.numel()
            )));
        }
        let b = vx.shape()[0];
        let inner: usize = vx.shape()[2..].iter().product();
        let mut y = vx.clone();
        {
            let yd = y.data_mut();
            let bd = vb.data();
            for bi in 0..b {
                for ch in 0..c {
                    let add = bd[ch / repeat];
                    let off = (bi * c + ch) * inner;
                    for v in &mut yd[off..off + inner] {
                        *v = *v + add;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddBias { x, bias, repeat }, y, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = crate::ops::relu(&self.nodes[x].value);
        let rg = self.rg(x);
        self.push(Op::Relu { x }, y, rg)
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, argmax) = maxpool2x2_with_argmax(&self.nodes[x].value)?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaxPool2x2 { x, argmax }, y, rg))
    }

    /// Training-mode batch normalization (see [`crate::ops::batchnorm_train`]).
    /// Also returns the batch mean and biased variance so callers can
    /// maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Tensor<T>, Tensor<T>)> {
        let fwd = batchnorm_forward(
            &self.nodes[x].value,
            self.nodes[gamma].value.data(),
            self.nodes[beta].value.data(),
            eps,
        )?;
        let c = fwd.mean.len();
        let mean = Tensor::new(&[c], fwd.mean)?;
        let var = Tensor::new(&[c], fwd.var)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let id = self.push(
            Op::BatchNorm { x, gamma, beta, x_hat: fwd.x_hat, inv_std: fwd.inv_std },
            fwd.y,
            rg,
        );
        Ok((id, mean, var))
    }

    /// Per-channel affine with constant coefficients: inference-mode
    /// normalization folded to y = x*scale[c] + shift[c].
    pub fn channel_affine(&mut self, x: NodeId, scale: Vec<T>, shift: Vec<T>) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        if vx.rank() < 2 {
            return Err(Error::shape(format!("channel_affine input needs rank >= 2, got {:?}", vx.shape())));
        }
        let c = vx.shape()[1];
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape(format!(
                "channel_affine wants {c} coefficients, got scale {} / shift {}",
                scale.len(),
                shift.len()
            )));
        }
        let b = vx.shape()[0];
        let inner: usize = vx.shape()[2..].iter().product();
        let mut y = vx.clone();
        {
            let yd = y.data_mut();
            for bi in 0..b {
                for ch in 0..c {
                    let (s, t) = (scale[ch], shift[ch]);
                    let off = (bi * c + ch) * inner;
                    for v in &mut yd[off..off + inner] {
                        *v = *v * s + t;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::ChannelAffine { x, scale }, y, rg))
    }

    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut impl Rng) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let mask = dropout_mask::<T>(vx.numel(), p, rng)?;
        let mut y = vx.clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v = *v * m;
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Dropout { x, mask }, y, rg))
    }

    /// Max over the group axis of [B,C,G,H,W], the pooling that turns a
    /// group feature map into a group-invariant one.
    pub fn coset_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let s = vx.shape();
        if s.len() != 5 {
            return Err(Error::shape(format!("coset_max_pool wants [B,C,G,H,W], got {:?}", s)));
        }
        let (b, c, g, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        if g == 0 {
            return Err(Error::shape("empty group axis"));
        }
        let hw = h * w;
        let mut y = Tensor::zeros(&[b, c, h, w]);
        let mut argmax = vec![0usize; y.numel()];
        {
            let yd = y.data_mut();
            let xd = vx.data();
            for bc in 0..b * c {
                let xoff = bc * g * hw;
                let yoff = bc * hw;
                for i in 0..hw {
                    let mut best = xoff + i;
                    let mut best_v = xd[best];
                    for gi in 1..g {
                        let cand = xoff + gi * hw + i;
                        if xd[cand] > best_v {
                            best = cand;
                            best_v = xd[cand];
                        }
                    }
                    yd[yoff + i] = best_v;
                    argmax[yoff + i] = best;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::CosetMaxPool { x, argmax }, y, rg))
    }

    /// Global spatial max: [B,C,H,W] -> [B,C].
    pub fn spatial_max(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let s = vx.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("spatial_max wants [B,C,H,W], got {:?}", s)));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        if hw == 0 {
            return Err(Error::shape("empty spatial extent"));
        }
        let mut y = Tensor::zeros(&[b, c]);
        let mut argmax = vec![0usize; b * c];
        {
            let yd = y.data_mut();
            let xd = vx.data();
            for bc in 0..b * c {
                let off = bc * hw;
                let mut best = off;
                let mut best_v = xd[best];
                for i in off + 1..off + hw {
                    if xd[i] > best_v {
                        best = i;
                        best_v = xd[i];
                    }
                }
                yd[bc] = best_v;
                argmax[bc] = best;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SpatialMax { x, argmax }, y, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.nodes[x].value.reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape { x }, y, rg))
    }

    /// Mean softmax cross-entropy: logits [B,K], one label per row.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let (loss, probs) = softmax_cross_entropy(&self.nodes[logits].value, &labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, probs, labels },
            Tensor::scalar(loss),
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = crate::ops::sum(&self.nodes[x].value);
        let rg = self.rg(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), rg)
    }

    /// Reverse-mode sweep from a scalar loss node. Returns per-node
    /// gradients; only leaves created with [`Graph::param`] (and interior
    /// nodes on a path to one) receive entries.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss >= self.nodes.len() {
            return Err(Error::invalid(format!("no node {loss} in graph of {}", self.nodes.len())));
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward starts from a scalar, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::full(self.nodes[loss].value.shape(), T::one()));
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    // parameter (or explicit-grad input): keep the gradient
                    grads[id] = Some(gy);
                }
                Op::Conv { x, f, groups, padding } => {
                    self.conv_backward(*x, *f, *groups, *padding, &gy, &mut grads)?;
                }
                Op::Gather { src, map } => {
                    if self.rg(*src) {
                        let g = Self::slot(&mut grads, *src, self.nodes[*src].value.shape());
                        let gd = g.data_mut();
                        for (&i, &v) in map.iter().zip(gy.data()) {
                            gd[i] += v;
                        }
                    }
                }
                Op::GatherPerSample { src, map } => {
                    if self.rg(*src) {
                        let sample_len: usize = self.nodes[*src].value.shape()[1..].iter().product();
                        let b = self.nodes[*src].value.shape()[0];
                        let out_len = map.len();
                        let g = Self::slot(&mut grads, *src, self.nodes[*src].value.shape());
                        let gd = g.data_mut();
                        for bi in 0..b {
                            let gs = &mut gd[bi * sample_len..][..sample_len];
                            let gys = &gy.data()[bi * out_len..][..out_len];
                            for (&i, &v) in map.iter().zip(gys) {
                                gs[i] += v;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.rg(*a) {
                        let vb = self.nodes[*b].value.data();
                        let g = Self::slot(&mut grads, *a, self.nodes[*a].value.shape());
                        for ((o, &gv), &v) in g.data_mut().iter_mut().zip(gy.data()).zip(vb) {
                            *o = gv.mul_add(v, *o);
                        }
                    }
                    if self.rg(*b) {
                        let va = self.nodes[*a].value.data();
                        let g = Self::slot(&mut grads, *b, self.nodes[*b].value.shape());
                        for ((o, &gv), &v) in g.data_mut().iter_mut().zip(gy.data()).zip(va) {
                            *o = gv.mul_add(v, *o);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &n in &[*a, *b] {
                        if self.rg(n) {
                            let g = Self::slot(&mut grads, n, self.nodes[n].value.shape());
                            for (o, &v) in g.data_mut().iter_mut().zip(gy.data()) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::AddBias { x, bias, repeat } => {
                    if self.rg(*x) {
                        let g = Self::slot(&mut grads, *x, self.nodes[*x].value.shape());
                        for (o, &v) in g.data_mut().iter_mut().zip(gy.data()) {
                            *o += v;
                        }
                    }
                    if self.rg(*bias) {
                        let xs = self.nodes[*x].value.shape();
                        let (b, c) = (xs[0], xs[1]);
                        let inner: usize = xs[2..].iter().product();
                        let g = Self::slot(&mut grads, *bias, self.nodes[*bias].value.shape());
                        let gd = g.data_mut();
                        for bi in 0..b {
                            for ch in 0..c {
                                let off = (bi * c + ch) * inner;
                                let mut s = 0.0f64;
                                for &v in &gy.data()[off..off + inner] {
                                    s += v.as_f64();
                                }
                                gd[ch / repeat] += T::cast(s);
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    if self.rg(*x) {
                        let vx = self.nodes[*x].value.data();
                        let g = Self::slot(&mut grads, *x, self.nodes[*x].value.shape());
                        for ((o, &gv), &v) in g.data_mut().iter_mut().zip(gy.data()).zip(vx) {
                            if v > T::zero() {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::MaxPool2x2 { x, argmax } | Op::CosetMaxPool { x, argmax } | Op::SpatialMax { x, argmax } => {
                    if self.rg(*x) {
                        let g = Self::slot(&mut grads, *x, self.nodes[*x].value.shape());
                        let gd = g.data_mut();
                        for (&i, &v) in argmax.iter().zip(gy.data()) {
                            gd[i] += v;
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, x_hat, inv_std } => {
                    self.batchnorm_backward(*x, *gamma, *beta, x_hat, inv_std, &gy, &mut grads);
                }
                Op::ChannelAffine { x, scale } => {
                    if self.rg(*x) {
                        let xs = self.nodes[*x].value.shape().to_vec();
                        let (b, c) = (xs[0], xs[1]);
                        let inner: usize = xs[2..].iter().product();
                        let g = Self::slot(&mut grads, *x, &xs);
                        let gd = g.data_mut();
                        for bi in 0..b {
                            for ch in 0..c {
                                let s = scale[ch];
                                let off = (bi * c + ch) * inner;
                                for (o, &v) in gd[off..off + inner].iter_mut().zip(&gy.data()[off..off + inner]) {
                                    *o = v.mul_add(s, *o);
                                }
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if self.rg(*x) {
                        let g = Self::slot(&mut grads, *x, self.nodes[*x].value.shape());
                        for ((o, &gv), &m) in g.data_mut().iter_mut().zip(gy.data()).zip(mask) {
                            *o = gv.mul_add(m, *o);
                        }
                    }
                }
                Op::Reshape { x } => {
                    if self.rg(*x) {
                        let g = Self::slot(&mut grads, *x, self.nodes[*x].value.shape());
                        for (o, &v) in g.data_mut().iter_mut().zip(gy.data()) {
                            *o += v;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    if self.rg(*logits) {
                        let gscale = gy.data()[0].as_f64();
                        let k = probs.shape()[probs.rank() - 1];
                        let b = probs.numel() / k;
                        let g = Self::slot(&mut grads, *logits, self.nodes[*logits].value.shape());
                        let gd = g.data_mut();
                        let pd = probs.data();
                        let inv_b = gscale / b as f64;
                        for bi in 0..b {
                            for j in 0..k {
                                let onehot = if labels[bi] == j { 1.0 } else { 0.0 };
                                gd[bi * k + j] += T::cast((pd[bi * k + j].as_f64() - onehot) * inv_b);
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    if self.rg(*x) {
                        let gv = gy.data()[0];
                        let g = Self::slot(&mut grads, *x, self.nodes[*x].value.shape());
                        for o in g.data_mut().iter_mut() {
                            *o += gv;
                        }
                    }
                }
            }
        }
        Ok(Gradients { inner: grads })
    }

    /// Get (allocating on first touch) the gradient accumulator of a node.
    fn slot<'a>(grads: &'a mut [Option<Tensor<T>>], id: NodeId, shape: &[usize]) -> &'a mut Tensor<T> {
        grads[id].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn conv_backward(
        &self,
        x: NodeId,
        f: NodeId,
        groups: usize,
        padding: Padding,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xs = self.nodes[x].value.shape().to_vec();
        let fs = self.nodes[f].value.shape().to_vec();
        let (b, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, cpg, k) = (fs[0], fs[1], fs[2]);
        let (pad, h_out, w_out) = conv_geometry(h, w, k, padding)?;
        let opg = c_out / groups;
        let (hw, hwo, kk) = (h * w, h_out * w_out, k * k);
        let gyd = gy.data();
        let threads = crate::intra_op_threads();

        if self.rg(x) {
            let fd = self.nodes[f].value.data();
            let gx = Self::slot(grads, x, &xs);
            let chunks: Vec<(usize, &mut [T])> = gx.data_mut().chunks_mut(c_in * hw).enumerate().collect();
            for_each_chunk_parallel(chunks, threads, &|bi, gx_s: &mut [T]| {
                let gys = &gyd[bi * c_out * hwo..][..c_out * hwo];
                for gi in 0..groups {
                    for cil in 0..cpg {
                        let ci = gi * cpg + cil;
                        let gxc = &mut gx_s[ci * hw..][..hw];
                        for col in 0..opg {
                            let co = gi * opg + col;
                            corr2d_grad_input(
                                &gys[co * hwo..][..hwo],
                                h_out,
                                w_out,
                                &fd[(co * cpg + cil) * kk..][..kk],
                                k,
                                pad,
                                gxc,
                                h,
                                w,
                            );
                        }
                    }
                }
            });
        }

        if self.rg(f) {
            let xd = self.nodes[x].value.data();
            let gf = Self::slot(grads, f, &fs);
            let chunks: Vec<(usize, &mut [T])> = gf.data_mut().chunks_mut(cpg * kk).enumerate().collect();
            for_each_chunk_parallel(chunks, threads, &|co, gf_row: &mut [T]| {
                let gi = co / opg;
                for cil in 0..cpg {
                    let ci = gi * cpg + cil;
                    let gk = &mut gf_row[cil * kk..][..kk];
                    for bi in 0..b {
                        corr2d_grad_kernel(
                            &xd[(bi * c_in + ci) * hw..][..hw],
                            h,
                            w,
                            &gyd[(bi * c_out + co) * hwo..][..hwo],
                            h_out,
                            w_out,
                            k,
                            pad,
                            gk,
                        );
                    }
                }
            });
        }
        Ok(())
    }

    fn batchnorm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: &Tensor<T>,
        inv_std: &[T],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.nodes[x].value.shape().to_vec();
        let (b, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let n = (b * inner) as f64;
        let gyd = gy.data();
        let xh = x_hat.data();

        // per-channel reductions, accumulated in f64
        let mut sum_gy = vec![0.0f64; c];
        let mut sum_gy_xh = vec![0.0f64; c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                let (mut s, mut sx) = (0.0f64, 0.0f64);
                for i in off..off + inner {
                    let g = gyd[i].as_f64();
                    s += g;
                    sx += g * xh[i].as_f64();
                }
                sum_gy[ch] += s;
                sum_gy_xh[ch] += sx;
            }
        }

        if self.rg(gamma) {
            let g = Self::slot(grads, gamma, self.nodes[gamma].value.shape());
            for (o, &v) in g.data_mut().iter_mut().zip(&sum_gy_xh) {
                *o += T::cast(v);
            }
        }
        if self.rg(beta) {
            let g = Self::slot(grads, beta, self.nodes[beta].value.shape());
            for (o, &v) in g.data_mut().iter_mut().zip(&sum_gy) {
                *o += T::cast(v);
            }
        }
        if self.rg(x) {
            let gam = self.nodes[gamma].value.data();
            let g = Self::slot(grads, x, &xs);
            let gd = g.data_mut();
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * inner;
                    let ga = gam[ch].as_f64();
                    let is = inv_std[ch].as_f64();
                    let m1 = ga * sum_gy[ch] / n;
                    let m2 = ga * sum_gy_xh[ch] / n;
                    for i in off..off + inner {
                        let dxh = gyd[i].as_f64() * ga;
                        gd[i] += T::cast(is * (dxh - m1 - xh[i].as_f64() * m2));
                    }
                }
            }
        }
    }
}

/// Convenience forward used in a few places: single convolution with a
/// constant filter, outside any training context.
pub fn conv_value<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let fi = g.input(f.clone());
    let y = g.conv2d(xi, fi, padding)?;
    Ok(g.value(y).clone())
}
