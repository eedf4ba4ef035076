//! The equivariant layer zoo: lifting and full group convolutions, their
//! g- and gc-separable factorizations (each with a naive expanded-filter
//! path and an efficient rearranged path), a depthwise-separable plain
//! convolution, and coset pooling.
//!
//! Layers hold [`Parameter`]s. A forward pass binds those parameters into
//! an autograd [`Graph`] (recording the binding order in [`ParamBinds`]),
//! builds the computation, and returns the output node. Filter expansion
//! happens inside the tape via gathers, so gradients flow back to the
//! stored parameters, not to the expanded bank.
//!
//! Per-sample convenience wrappers (`lift_forward`, `gconv_forward`, ...)
//! run the same tape code on a batch of one, so there is a single source
//! of truth for the layer semantics.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::group::{
    full_filter_expansion_map, kernel_index_map, pointwise_expansion_map, GroupSpec,
};
use crate::ops::Padding;
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

/// Graph leaves bound to layer parameters during one forward build, in
/// the same order as [`params`](GConvLayer::params) lists them.
#[derive(Default)]
pub struct ParamBinds {
    pub nodes: Vec<NodeId>,
}

impl ParamBinds {
    pub fn new() -> Self {
        ParamBinds { nodes: Vec::new() }
    }

    pub fn bind<T: Scalar>(&mut self, g: &mut Graph<T>, p: &Parameter<T>) -> NodeId {
        let id = g.param(p.value.clone());
        self.nodes.push(id);
        id
    }
}

/// He-uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::cast(rng.gen_range(-bound..bound)))
}

/// Symmetric uniform initialization: U(-bound, +bound).
pub fn uniform_symmetric<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::cast(rng.gen_range(-bound..bound)))
}

fn optional_bias<T: Scalar>(c_out: usize, bias: bool) -> Option<Parameter<T>> {
    bias.then(|| Parameter::new(Tensor::zeros(&[c_out])))
}

/// Full (and lifting) group convolution layer. Stored filters are
/// [C_out, C_in, G_in, k, k] with G_in = 1 for the lifting case; the
/// equivariant bank is expanded on every forward pass.
#[derive(Clone, Debug)]
pub struct GConvLayer<T: Scalar> {
    pub spec: GroupSpec,
    /// Stored filters [C_out, C_in, G_in, k, k].
    pub filters: Parameter<T>,
    /// One bias per output channel, shared across the output group axis
    /// (a per-(n,h) bias would break equivariance).
    pub bias: Option<Parameter<T>>,
    pub padding: Padding,
}

impl<T: Scalar> GConvLayer<T> {
    pub fn new(spec: GroupSpec, filters: Tensor<T>, bias: Option<Tensor<T>>, padding: Padding) -> Result<Self> {
        let s = filters.shape();
        if s.len() != 5 || s[3] != s[4] {
            return Err(Error::shape(format!("filters want [C_out,C_in,G_in,k,k], got {:?}", s)));
        }
        if s[2] != 1 && s[2] != spec.order() {
            return Err(Error::invalid(format!(
                "filter group depth {} must be 1 (lifting) or {}",
                s[2],
                spec.order()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::shape(format!("bias wants [{}], got {:?}", s[0], b.shape())));
            }
        }
        Ok(GConvLayer { spec, filters: Parameter::new(filters), bias: bias.map(Parameter::new), padding })
    }

    /// Fresh layer with He-uniform filters (fan-in = C_in*G_in*k^2) and
    /// zero bias.
    pub fn new_random(
        spec: GroupSpec,
        c_out: usize,
        c_in: usize,
        g_in: usize,
        k: usize,
        bias: bool,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let filters = he_uniform(&[c_out, c_in, g_in, k, k], c_in * g_in * k * k, rng);
        GConvLayer::new(spec, filters, optional_bias::<T>(c_out, bias).map(|p| p.value), padding)
    }

    pub fn c_out(&self) -> usize {
        self.filters.value.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.filters.value.shape()[1]
    }

    pub fn g_in(&self) -> usize {
        self.filters.value.shape()[2]
    }

    pub fn kernel_size(&self) -> usize {
        self.filters.value.shape()[3]
    }

    pub fn is_lifting(&self) -> bool {
        self.g_in() == 1
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.filters];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.filters];
        v.extend(self.bias.as_mut());
        v
    }

    /// Batched forward. Lifting layers take x [B,C_in,H,W]; inner layers
    /// take x [B,C_in,G_in,H,W]. Output is [B,C_out,G_out,H',W'].
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, binds: &mut ParamBinds) -> Result<NodeId> {
        let order = self.spec.order();
        let (c_out, c_in, g_in, k) = (self.c_out(), self.c_in(), self.g_in(), self.kernel_size());
        let xr = self.flatten_input(g, x)?;
        let fnode = binds.bind(g, &self.filters);
        let map = full_filter_expansion_map(&self.spec, c_out, c_in, g_in, k)?;
        let fexp = g.gather(fnode, map, &[c_out * order, c_in * g_in, k, k])?;
        let y = g.conv2d(xr, fexp, self.padding)?;
        let y = add_shared_bias(g, y, &self.bias, order, binds)?;
        split_group_axis(g, y, c_out, order)
    }

    /// Validate the input and flatten (C_in, G_in) into one channel axis.
    fn flatten_input(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let xs = g.value(x).shape().to_vec();
        if self.is_lifting() {
            if xs.len() != 4 || xs[1] != self.c_in() {
                return Err(Error::shape(format!(
                    "lifting layer wants [B,{},H,W], got {:?}",
                    self.c_in(),
                    xs
                )));
            }
            Ok(x)
        } else {
            if xs.len() != 5 || xs[1] != self.c_in() || xs[2] != self.g_in() {
                return Err(Error::shape(format!(
                    "group conv wants [B,{},{},H,W], got {:?}",
                    self.c_in(),
                    self.g_in(),
                    xs
                )));
            }
            g.reshape(x, &[xs[0], xs[1] * xs[2], xs[3], xs[4]])
        }
    }
}

/// g-separable group convolution: one spatial kernel per (C_out, C_in)
/// pair shared along the group axis, mixed by pointwise weights w.
#[derive(Clone, Debug)]
pub struct SepGConvLayerG<T: Scalar> {
    pub spec: GroupSpec,
    /// Shared spatial kernels [C_out, C_in, k, k].
    pub kernel: Parameter<T>,
    /// Group-mixing weights [C_out, C_in, G].
    pub pointwise: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub padding: Padding,
}

impl<T: Scalar> SepGConvLayerG<T> {
    pub fn new(
        spec: GroupSpec,
        kernel: Tensor<T>,
        pointwise: Tensor<T>,
        bias: Option<Tensor<T>>,
        padding: Padding,
    ) -> Result<Self> {
        let ks = kernel.shape();
        let ws = pointwise.shape();
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::shape(format!("spatial kernels want [C_out,C_in,k,k], got {:?}", ks)));
        }
        if ws != [ks[0], ks[1], spec.order()] {
            return Err(Error::shape(format!(
                "pointwise weights want [{},{},{}], got {:?}",
                ks[0],
                ks[1],
                spec.order(),
                ws
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [ks[0]] {
                return Err(Error::shape(format!("bias wants [{}], got {:?}", ks[0], b.shape())));
            }
        }
        Ok(SepGConvLayerG {
            spec,
            kernel: Parameter::new(kernel),
            pointwise: Parameter::new(pointwise),
            bias: bias.map(Parameter::new),
            padding,
        })
    }

    pub fn new_random(
        spec: GroupSpec,
        c_out: usize,
        c_in: usize,
        k: usize,
        bias: bool,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let order = spec.order();
        let kernel = he_uniform(&[c_out, c_in, k, k], c_in * order * k * k, rng);
        let pointwise = uniform_symmetric(&[c_out, c_in, order], 1.0 / (order as f64).sqrt(), rng);
        SepGConvLayerG::new(spec, kernel, pointwise, optional_bias::<T>(c_out, bias).map(|p| p.value), padding)
    }

    pub fn c_out(&self) -> usize {
        self.kernel.value.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernel.value.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.value.shape()[2]
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.kernel, &self.pointwise];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.kernel, &mut self.pointwise];
        v.extend(self.bias.as_mut());
        v
    }

    fn check_input(&self, g: &Graph<T>, x: NodeId) -> Result<[usize; 5]> {
        let xs = g.value(x).shape();
        let want = [self.c_in(), self.spec.order()];
        if xs.len() != 5 || xs[1] != want[0] || xs[2] != want[1] {
            return Err(Error::shape(format!(
                "separable group conv wants [B,{},{},H,W], got {:?}",
                want[0], want[1], xs
            )));
        }
        Ok([xs[0], xs[1], xs[2], xs[3], xs[4]])
    }

    /// Naive path: expand the full filter bank
    /// F~[n,h,c,g] = act(h,K[n,c]) * w[n,c,inv(h)g] inside the tape, then
    /// run one plain convolution over it.
    pub fn forward_naive(&self, g: &mut Graph<T>, x: NodeId, binds: &mut ParamBinds) -> Result<NodeId> {
        let [b, c_in, order, hh, ww] = self.check_input(g, x)?;
        let (c_out, k) = (self.c_out(), self.kernel_size());
        let kk = k * k;
        let knode = binds.bind(g, &self.kernel);
        let wnode = binds.bind(g, &self.pointwise);
        let xr = g.reshape(x, &[b, c_in * order, hh, ww])?;

        // spatial part: [n,h,c,g,a,b] <- K[n,c, sigma_h(a,b)], replicated over g
        let kmaps: Vec<Vec<usize>> = (0..order).map(|h| kernel_index_map(&self.spec, h, k)).collect();
        let mut kmap = Vec::with_capacity(c_out * order * c_in * order * kk);
        for n in 0..c_out {
            for h in 0..order {
                for c in 0..c_in {
                    let base = (n * c_in + c) * kk;
                    for _g in 0..order {
                        kmap.extend(kmaps[h].iter().map(|&i| base + i));
                    }
                }
            }
        }
        let gk = g.gather(knode, kmap, &[c_out * order, c_in * order, k, k])?;

        // pointwise part: [n,h,c,g,a,b] <- w[n,c,inv(h)g], replicated over (a,b)
        let wexp = pointwise_expansion_map(&self.spec, c_out, c_in, order)?;
        let mut wmap = Vec::with_capacity(wexp.len() * kk);
        for (pos, &src) in wexp.iter().enumerate() {
            let _ = pos;
            wmap.extend(std::iter::repeat(src).take(kk));
        }
        // note: wexp is laid out [n,h,c,g]; kmap above is [n,h,c,g] too
        let gw = g.gather(wnode, wmap, &[c_out * order, c_in * order, k, k])?;

        let fexp = g.mul(gk, gw)?;
        let y = g.conv2d(xr, fexp, self.padding)?;
        let y = add_shared_bias(g, y, &self.bias, order, binds)?;
        split_group_axis(g, y, c_out, order)
    }

    /// Efficient path: a grouped 1x1 convolution (C_in groups) applying
    /// the permuted pointwise weights, a channel reorder, then a grouped
    /// spatial convolution (C_out*G_out groups) with the transformed
    /// shared kernels.
    pub fn forward_efficient(&self, g: &mut Graph<T>, x: NodeId, binds: &mut ParamBinds) -> Result<NodeId> {
        let [b, c_in, order, hh, ww] = self.check_input(g, x)?;
        let (c_out, k) = (self.c_out(), self.kernel_size());
        let kk = k * k;
        let nh = c_out * order;
        let knode = binds.bind(g, &self.kernel);
        let wnode = binds.bind(g, &self.pointwise);
        let xr = g.reshape(x, &[b, c_in * order, hh, ww])?;

        // stage 1: per input channel c, mix its group slices into all
        // (n,h) outputs: grouped 1x1 conv, filter[(c,(n,h)), g] = w[n,c,inv(h)g]
        let mut w1map = Vec::with_capacity(c_in * nh * order);
        for c in 0..c_in {
            for n in 0..c_out {
                for h in 0..order {
                    let hinv = self.spec.inverse_idx(h);
                    for gg in 0..order {
                        w1map.push((n * c_in + c) * order + self.spec.compose_idx(hinv, gg));
                    }
                }
            }
        }
        let w1 = g.gather(wnode, w1map, &[c_in * nh, order, 1, 1])?;
        let x1 = g.grouped_conv2d(xr, w1, c_in, Padding::Same)?;

        // reorder channels (c,(n,h)) -> ((n,h),c); the map covers one
        // whole sample including the spatial extent
        let hw = hh * ww;
        let mut perm = Vec::with_capacity(c_in * nh * hw);
        for nhi in 0..nh {
            for c in 0..c_in {
                let src = (c * nh + nhi) * hw;
                perm.extend(src..src + hw);
            }
        }
        let x2 = g.gather_per_sample(x1, perm, &[nh * c_in, hh, ww])?;

        // stage 2: per (n,h) group, correlate its C_in planes with the
        // transformed shared kernels act(h, K[n,c]) and sum
        let mut k2map = Vec::with_capacity(nh * c_in * kk);
        for n in 0..c_out {
            for h in 0..order {
                let kmap = kernel_index_map(&self.spec, h, k);
                for c in 0..c_in {
                    let base = (n * c_in + c) * kk;
                    k2map.extend(kmap.iter().map(|&i| base + i));
                }
            }
        }
        let k2 = g.gather(knode, k2map, &[nh, c_in, k, k])?;
        let y = g.grouped_conv2d(x2, k2, nh, self.padding)?;
        let y = add_shared_bias(g, y, &self.bias, order, binds)?;
        split_group_axis(g, y, c_out, order)
    }
}

/// gc-separable group convolution: a single spatial kernel per output
/// channel, shared over both the input channel and group axes.
#[derive(Clone, Debug)]
pub struct SepGConvLayerGC<T: Scalar> {
    pub spec: GroupSpec,
    /// Shared spatial kernels [C_out, k, k].
    pub kernel: Parameter<T>,
    /// Mixing weights [C_out, C_in, G].
    pub pointwise: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub padding: Padding,
}

impl<T: Scalar> SepGConvLayerGC<T> {
    pub fn new(
        spec: GroupSpec,
        kernel: Tensor<T>,
        pointwise: Tensor<T>,
        bias: Option<Tensor<T>>,
        padding: Padding,
    ) -> Result<Self> {
        let ks = kernel.shape();
        let ws = pointwise.shape();
        if ks.len() != 3 || ks[1] != ks[2] {
            return Err(Error::shape(format!("spatial kernels want [C_out,k,k], got {:?}", ks)));
        }
        if ws.len() != 3 || ws[0] != ks[0] || ws[2] != spec.order() {
            return Err(Error::shape(format!(
                "mixing weights want [{},C_in,{}], got {:?}",
                ks[0],
                spec.order(),
                ws
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [ks[0]] {
                return Err(Error::shape(format!("bias wants [{}], got {:?}", ks[0], b.shape())));
            }
        }
        Ok(SepGConvLayerGC {
            spec,
            kernel: Parameter::new(kernel),
            pointwise: Parameter::new(pointwise),
            bias: bias.map(Parameter::new),
            padding,
        })
    }

    pub fn new_random(
        spec: GroupSpec,
        c_out: usize,
        c_in: usize,
        k: usize,
        bias: bool,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let order = spec.order();
        let kernel = he_uniform(&[c_out, k, k], c_in * order * k * k, rng);
        let pointwise = uniform_symmetric(&[c_out, c_in, order], 1.0 / (order as f64).sqrt(), rng);
        SepGConvLayerGC::new(spec, kernel, pointwise, optional_bias::<T>(c_out, bias).map(|p| p.value), padding)
    }

    pub fn c_out(&self) -> usize {
        self.kernel.value.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.pointwise.value.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.value.shape()[1]
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.kernel, &self.pointwise];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.kernel, &mut self.pointwise];
        v.extend(self.bias.as_mut());
        v
    }

    fn check_input(&self, g: &Graph<T>, x: NodeId) -> Result<[usize; 5]> {
        let xs = g.value(x).shape();
        if xs.len() != 5 || xs[1] != self.c_in() || xs[2] != self.spec.order() {
            return Err(Error::shape(format!(
                "separable group conv wants [B,{},{},H,W], got {:?}",
                self.c_in(),
                self.spec.order(),
                xs
            )));
        }
        Ok([xs[0], xs[1], xs[2], xs[3], xs[4]])
    }

    /// Naive path: expand F~[n,h,c,g] = act(h,K[n]) * w[n,c,inv(h)g] and
    /// run one plain convolution.
    pub fn forward_naive(&self, g: &mut Graph<T>, x: NodeId, binds: &mut ParamBinds) -> Result<NodeId> {
        let [b, c_in, order, hh, ww] = self.check_input(g, x)?;
        let (c_out, k) = (self.c_out(), self.kernel_size());
        let kk = k * k;
        let knode = binds.bind(g, &self.kernel);
        let wnode = binds.bind(g, &self.pointwise);
        let xr = g.reshape(x, &[b, c_in * order, hh, ww])?;

        let kmaps: Vec<Vec<usize>> = (0..order).map(|h| kernel_index_map(&self.spec, h, k)).collect();
        let mut kmap = Vec::with_capacity(c_out * order * c_in * order * kk);
        for n in 0..c_out {
            for h in 0..order {
                for _cg in 0..c_in * order {
                    kmap.extend(kmaps[h].iter().map(|&i| n * kk + i));
                }
            }
        }
        let gk = g.gather(knode, kmap, &[c_out * order, c_in * order, k, k])?;

        let wexp = pointwise_expansion_map(&self.spec, c_out, c_in, order)?;
        let mut wmap = Vec::with_capacity(wexp.len() * kk);
        for &src in &wexp {
            wmap.extend(std::iter::repeat(src).take(kk));
        }
        let gw = g.gather(wnode, wmap, &[c_out * order, c_in * order, k, k])?;

        let fexp = g.mul(gk, gw)?;
        let y = g.conv2d(xr, fexp, self.padding)?;
        let y = add_shared_bias(g, y, &self.bias, order, binds)?;
        split_group_axis(g, y, c_out, order)
    }

    /// Efficient path: a full 1x1 convolution from C_in*G to C_out*G_out
    /// channels (the permuted mixing weights), then a depthwise spatial
    /// convolution with one transformed kernel per (n,h) channel — an
    /// inverse depthwise-separable convolution.
    pub fn forward_efficient(&self, g: &mut Graph<T>, x: NodeId, binds: &mut ParamBinds) -> Result<NodeId> {
        let [b, c_in, order, hh, ww] = self.check_input(g, x)?;
        let (c_out, k) = (self.c_out(), self.kernel_size());
        let kk = k * k;
        let nh = c_out * order;
        let knode = binds.bind(g, &self.kernel);
        let wnode = binds.bind(g, &self.pointwise);
        let xr = g.reshape(x, &[b, c_in * order, hh, ww])?;

        // stage 1: filter[(n,h),(c,g)] = w[n,c,inv(h)g]
        let w1map = pointwise_expansion_map(&self.spec, c_out, c_in, order)?;
        let w1 = g.gather(wnode, w1map, &[nh, c_in * order, 1, 1])?;
        let x1 = g.conv2d(xr, w1, Padding::Same)?;

        // stage 2: depthwise, kernel act(h, K[n]) on channel (n,h)
        let mut k2map = Vec::with_capacity(nh * kk);
        for n in 0..c_out {
            for h in 0..order {
                let kmap = kernel_index_map(&self.spec, h, k);
                k2map.extend(kmap.iter().map(|&i| n * kk + i));
            }
        }
        let k2 = g.gather(knode, k2map, &[nh, 1, k, k])?;
        let y = g.grouped_conv2d(x1, k2, nh, self.padding)?;
        let y = add_shared_bias(g, y, &self.bias, order, binds)?;
        split_group_axis(g, y, c_out, order)
    }
}

/// Plain (non-equivariant) convolution layer for the baseline networks.
#[derive(Clone, Debug)]
pub struct Conv2dLayer<T: Scalar> {
    /// [C_out, C_in, k, k]
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub padding: Padding,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, padding: Padding) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::shape(format!("weights want [C_out,C_in,k,k], got {:?}", s)));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::shape(format!("bias wants [{}], got {:?}", s[0], b.shape())));
            }
        }
        Ok(Conv2dLayer { weight: Parameter::new(weight), bias: bias.map(Parameter::new), padding })
    }

    pub fn new_random(
        c_out: usize,
        c_in: usize,
        k: usize,
        bias: bool,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = he_uniform(&[c_out, c_in, k, k], c_in * k * k, rng);
        Conv2dLayer::new(weight, optional_bias::<T>(c_out, bias).map(|p| p.value), padding)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, binds: &mut ParamBinds) -> Result<NodeId> {
        let wnode = binds.bind(g, &self.weight);
        let y = g.conv2d(x, wnode, self.padding)?;
        if let Some(bias) = &self.bias {
            let bnode = binds.bind(g, bias);
            g.add_bias(y, bnode, 1)
        } else {
            Ok(y)
        }
    }
}

/// Depthwise-separable plain convolution (per-channel spatial kernel,
/// then 1x1 channel mixing), the baseline counterpart of the gc layer.
#[derive(Clone, Debug)]
pub struct DepthwiseSepConv2dLayer<T: Scalar> {
    /// [C_in, k, k]
    pub depthwise: Parameter<T>,
    pub depthwise_bias: Option<Parameter<T>>,
    /// [C_out, C_in]
    pub pointwise: Parameter<T>,
    pub pointwise_bias: Option<Parameter<T>>,
    pub padding: Padding,
}

impl<T: Scalar> DepthwiseSepConv2dLayer<T> {
    pub fn new(
        depthwise: Tensor<T>,
        pointwise: Tensor<T>,
        bias: bool,
        padding: Padding,
    ) -> Result<Self> {
        let ds = depthwise.shape();
        let ps = pointwise.shape();
        if ds.len() != 3 || ds[1] != ds[2] {
            return Err(Error::shape(format!("depthwise kernels want [C_in,k,k], got {:?}", ds)));
        }
        if ps.len() != 2 || ps[1] != ds[0] {
            return Err(Error::shape(format!("pointwise weights want [C_out,{}], got {:?}", ds[0], ps)));
        }
        Ok(DepthwiseSepConv2dLayer {
            depthwise_bias: optional_bias::<T>(ds[0], bias),
            pointwise_bias: optional_bias::<T>(ps[0], bias),
            depthwise: Parameter::new(depthwise),
            pointwise: Parameter::new(pointwise),
            padding,
        })
    }

    pub fn new_random(
        c_out: usize,
        c_in: usize,
        k: usize,
        bias: bool,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let depthwise = he_uniform(&[c_in, k, k], k * k, rng);
        let pointwise = he_uniform(&[c_out, c_in], c_in, rng);
        DepthwiseSepConv2dLayer::new(depthwise, pointwise, bias, padding)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.depthwise];
        v.extend(self.depthwise_bias.as_ref());
        v.push(&self.pointwise);
        v.extend(self.pointwise_bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.depthwise];
        v.extend(self.depthwise_bias.as_mut());
        v.push(&mut self.pointwise);
        v.extend(self.pointwise_bias.as_mut());
        v
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, binds: &mut ParamBinds) -> Result<NodeId> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("depthwise separable conv wants [B,C,H,W], got {:?}", xs)));
        }
        let c_in = self.depthwise.value.shape()[0];
        let k = self.depthwise.value.shape()[1];
        let c_out = self.pointwise.value.shape()[0];
        let dnode = binds.bind(g, &self.depthwise);
        let dopt = self.depthwise_bias.as_ref().map(|b| binds.bind(g, b));
        let pnode = binds.bind(g, &self.pointwise);
        let popt = self.pointwise_bias.as_ref().map(|b| binds.bind(g, b));

        let dfilt = g.reshape(dnode, &[c_in, 1, k, k])?;
        let mut y = g.grouped_conv2d(x, dfilt, c_in, self.padding)?;
        if let Some(bn) = dopt {
            y = g.add_bias(y, bn, 1)?;
        }
        let pfilt = g.reshape(pnode, &[c_out, c_in, 1, 1])?;
        let mut y = g.conv2d(y, pfilt, Padding::Same)?;
        if let Some(bn) = popt {
            y = g.add_bias(y, bn, 1)?;
        }
        Ok(y)
    }
}

fn add_shared_bias<T: Scalar>(
    g: &mut Graph<T>,
    y: NodeId,
    bias: &Option<Parameter<T>>,
    repeat: usize,
    binds: &mut ParamBinds,
) -> Result<NodeId> {
    match bias {
        Some(b) => {
            let bnode = binds.bind(g, b);
            g.add_bias(y, bnode, repeat)
        }
        None => Ok(y),
    }
}

fn split_group_axis<T: Scalar>(g: &mut Graph<T>, y: NodeId, c_out: usize, order: usize) -> Result<NodeId> {
    let ys = g.value(y).shape().to_vec();
    g.reshape(y, &[ys[0], c_out, order, ys[2], ys[3]])
}

/// Run a per-sample forward through a single-element batch.
fn run_single<T: Scalar>(
    x: &Tensor<T>,
    build: impl FnOnce(&mut Graph<T>, NodeId, &mut ParamBinds) -> Result<NodeId>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xi = g.input(x.reshape(&shape)?);
    let mut binds = ParamBinds::new();
    let y = build(&mut g, xi, &mut binds)?;
    let yv = g.value(y);
    let out_shape: Vec<usize> = yv.shape()[1..].to_vec();
    yv.reshape(&out_shape)
}

/// Lifting forward on one image: X [C_in,H,W] -> [C_out,G_out,H',W'].
pub fn lift_forward<T: Scalar>(layer: &GConvLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if !layer.is_lifting() {
        return Err(Error::invalid(format!(
            "lift_forward needs filter group depth 1, this layer has {}",
            layer.g_in()
        )));
    }
    run_single(x, |g, xi, binds| layer.forward(g, xi, binds))
}

/// Full group convolution on one feature map:
/// X [C_in,G_in,H,W] -> [C_out,G_out,H',W'].
pub fn gconv_forward<T: Scalar>(layer: &GConvLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if layer.is_lifting() {
        return Err(Error::invalid("gconv_forward needs a non-lifting layer; use lift_forward"));
    }
    run_single(x, |g, xi, binds| layer.forward(g, xi, binds))
}

/// g-separable forward (naive expanded-filter path) on one feature map.
pub fn sep_g_forward_naive<T: Scalar>(layer: &SepGConvLayerG<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    run_single(x, |g, xi, binds| layer.forward_naive(g, xi, binds))
}

/// g-separable forward (rearranged efficient path) on one feature map.
pub fn sep_g_forward_efficient<T: Scalar>(layer: &SepGConvLayerG<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    run_single(x, |g, xi, binds| layer.forward_efficient(g, xi, binds))
}

/// gc-separable forward (naive expanded-filter path) on one feature map.
pub fn sep_gc_forward_naive<T: Scalar>(layer: &SepGConvLayerGC<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    run_single(x, |g, xi, binds| layer.forward_naive(g, xi, binds))
}

/// gc-separable forward (inverse depthwise-separable efficient path) on
/// one feature map.
pub fn sep_gc_forward_efficient<T: Scalar>(layer: &SepGConvLayerGC<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    run_single(x, |g, xi, binds| layer.forward_efficient(g, xi, binds))
}

/// Depthwise-separable plain convolution on one image: per-channel
/// spatial correlation with K [C_in,k,k], then 1x1 mixing by W
/// [C_out,C_in].
pub fn depthwise_separable_conv2d<T: Scalar>(
    x: &Tensor<T>,
    k_depth: &Tensor<T>,
    w_point: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ds = k_depth.shape();
    let ps = w_point.shape();
    if ds.len() != 3 || ds[1] != ds[2] {
        return Err(Error::shape(format!("depthwise kernels want [C_in,k,k], got {:?}", ds)));
    }
    if ps.len() != 2 || ps[1] != ds[0] {
        return Err(Error::shape(format!("pointwise weights want [C_out,{}], got {:?}", ds[0], ps)));
    }
    let (c_in, k) = (ds[0], ds[1]);
    let mid = crate::ops::grouped_conv2d(x, &k_depth.reshape(&[c_in, 1, k, k])?, c_in, padding)?;
    crate::ops::conv2d(&mid, &w_point.reshape(&[ps[0], c_in, 1, 1])?, Padding::Same)
}

/// Reduction applied by [`group_coset_pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

/// Collapse the group axis of X [C,G,H,W]; the result is invariant under
/// any group-axis permutation of the input.
pub fn group_coset_pool<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("group_coset_pool wants [C,G,H,W], got {:?}", s)));
    }
    let (c, g, h, w) = (s[0], s[1], s[2], s[3]);
    if g == 0 {
        return Err(Error::shape("empty group axis"));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    let xd = x.data();
    let od = out.data_mut();
    for ci in 0..c {
        for i in 0..hw {
            let mut acc = xd[ci * g * hw + i];
            for gi in 1..g {
                let v = xd[(ci * g + gi) * hw + i];
                acc = match mode {
                    PoolMode::Max => acc.max(v),
                    PoolMode::Mean => acc + v,
                };
            }
            od[ci * hw + i] = match mode {
                PoolMode::Max => acc,
                PoolMode::Mean => acc / T::cast(g as f64),
            };
        }
    }
    Ok(out)
}
