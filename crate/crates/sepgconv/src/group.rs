//! Finite symmetry groups of the square grid: the four rotations (C4)
//! and the four rotations plus mirror images (D4, order 8).
//!
//! Element indexing is fixed so tables and tests are reproducible:
//! C4 = {r0,r1,r2,r3} (counter-clockwise quarter turns), D4 adds
//! {m·r0,...,m·r3} at indices 4..8, where m is the horizontal mirror.
//! Index 0 is always the identity.
//!
//! Kernel transforms are exact index permutations of the k x k grid — no
//! interpolation — so equivariance identities hold to machine precision.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupKind {
    /// Quarter-turn rotations, order 4 (the "p4" setting).
    C4,
    /// Rotations and mirror flips, order 8 (the "p4m" setting).
    D4,
}

impl GroupKind {
    pub fn order(self) -> usize {
        match self {
            GroupKind::C4 => 4,
            GroupKind::D4 => 8,
        }
    }

    /// Conventional plane-group name used on the command line.
    pub fn plane_name(self) -> &'static str {
        match self {
            GroupKind::C4 => "p4",
            GroupKind::D4 => "p4m",
        }
    }
}

/// An element of a specific group, by index. Construct through
/// [`GroupSpec::element`] so the bound is checked once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupElement {
    index: usize,
}

impl GroupElement {
    pub fn index(self) -> usize {
        self.index
    }
}

/// A concrete group: composition table, inverses, and the kernel action.
#[derive(Clone, Debug)]
pub struct GroupSpec {
    kind: GroupKind,
    order: usize,
    /// Row-major `order x order`; entry `[a][b]` is the index of a·b.
    cayley: Vec<usize>,
    inverse: Vec<usize>,
}

/// Split an element index into (mirror exponent, rotation exponent).
#[inline]
fn split(kind: GroupKind, i: usize) -> (usize, usize) {
    match kind {
        GroupKind::C4 => (0, i),
        GroupKind::D4 => (i / 4, i % 4),
    }
}

#[inline]
fn fuse(kind: GroupKind, s: usize, t: usize) -> usize {
    match kind {
        GroupKind::C4 => t,
        GroupKind::D4 => s * 4 + t,
    }
}

impl GroupSpec {
    pub fn new(kind: GroupKind) -> GroupSpec {
        let order = kind.order();
        let mut cayley = vec![0usize; order * order];
        for a in 0..order {
            let (s1, t1) = split(kind, a);
            for b in 0..order {
                let (s2, t2) = split(kind, b);
                // m^s1 r^t1 · m^s2 r^t2 = m^(s1+s2) r^(±t1+t2): moving r^t1
                // past a mirror negates the rotation.
                let s = (s1 + s2) % 2;
                let t = (if s2 == 1 { 4 - t1 } else { t1 } + t2) % 4;
                cayley[a * order + b] = fuse(kind, s, t);
            }
        }
        let inverse = (0..order)
            .map(|a| (0..order).find(|&b| cayley[a * order + b] == 0).expect("every element has an inverse"))
            .collect();
        GroupSpec { kind, order, cayley, inverse }
    }

    pub fn c4() -> GroupSpec {
        GroupSpec::new(GroupKind::C4)
    }

    pub fn d4() -> GroupSpec {
        GroupSpec::new(GroupKind::D4)
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn element(&self, index: usize) -> Result<GroupElement> {
        if index < self.order {
            Ok(GroupElement { index })
        } else {
            Err(Error::GroupIndex { index, order: self.order })
        }
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement { index: 0 }
    }

    pub fn elements(&self) -> impl Iterator<Item = GroupElement> {
        (0..self.order).map(|index| GroupElement { index })
    }

    fn check(&self, e: GroupElement) -> Result<usize> {
        if e.index < self.order {
            Ok(e.index)
        } else {
            Err(Error::GroupIndex { index: e.index, order: self.order })
        }
    }

    pub fn compose(&self, a: GroupElement, b: GroupElement) -> Result<GroupElement> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        Ok(GroupElement { index: self.compose_idx(a, b) })
    }

    pub fn inverse(&self, a: GroupElement) -> Result<GroupElement> {
        Ok(GroupElement { index: self.inverse[self.check(a)?] })
    }

    #[inline]
    pub(crate) fn compose_idx(&self, a: usize, b: usize) -> usize {
        self.cayley[a * self.order + b]
    }

    #[inline]
    pub(crate) fn inverse_idx(&self, a: usize) -> usize {
        self.inverse[a]
    }
}

/// Source-index permutation of a flattened k x k kernel under element `g`:
/// `out[i] = in[map[i]]`.
///
/// The quarter turn r1 sends grid position (i,j) to (k-1-j, i); the mirror
/// m sends (i,j) to (i, k-1-j). An element m^s r^t rotates first, then
/// mirrors, which together with the Cayley table above makes the action a
/// homomorphism (tested exhaustively).
pub(crate) fn kernel_index_map(spec: &GroupSpec, g: usize, k: usize) -> Vec<usize> {
    let (s, t) = split(spec.kind(), g);
    let mut cur: Vec<usize> = (0..k * k).collect();
    let mut next = vec![0usize; k * k];
    // out[a][b] = cur[b][k-1-a]  (one CCW quarter turn)
    for _ in 0..t {
        for a in 0..k {
            for b in 0..k {
                next[a * k + b] = cur[b * k + (k - 1 - a)];
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    // out[a][b] = cur[a][k-1-b]  (horizontal mirror)
    if s == 1 {
        for a in 0..k {
            for b in 0..k {
                next[a * k + b] = cur[a * k + (k - 1 - b)];
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Transform a square kernel by the grid action of `g`.
pub fn act_on_kernel<T: Scalar>(spec: &GroupSpec, g: GroupElement, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let gi = spec.element(g.index())?.index();
    let shape = kernel.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("act_on_kernel wants a square [k,k] kernel, got {:?}", shape)));
    }
    let k = shape[0];
    let map = kernel_index_map(spec, gi, k);
    let src = kernel.data();
    Tensor::new(shape, map.iter().map(|&i| src[i]).collect())
}

/// Regular-representation permutation along `axis` (whose size must equal
/// the group order): `out[..., g, ...] = in[..., inverse(h)·g, ...]`.
pub fn permute_group_axis<T: Scalar>(
    spec: &GroupSpec,
    h: GroupElement,
    x: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    let hi = spec.check(h)?;
    if axis >= x.rank() {
        return Err(Error::shape(format!("axis {axis} out of range for shape {:?}", x.shape())));
    }
    if x.shape()[axis] != spec.order() {
        return Err(Error::shape(format!(
            "group axis {axis} has size {}, group order is {}",
            x.shape()[axis],
            spec.order()
        )));
    }
    let hinv = spec.inverse_idx(hi);
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let order = spec.order();
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for g in 0..order {
            let src = spec.compose_idx(hinv, g);
            let dst_off = (o * order + g) * inner;
            let src_off = (o * order + src) * inner;
            od[dst_off..dst_off + inner].copy_from_slice(&xd[src_off..src_off + inner]);
        }
    }
    Ok(out)
}

/// Source map for expanding stored filters F [C_out,C_in,G_in,k,k] into
/// the full bank F~ [C_out,G_out,C_in,G_in,k,k]:
///
///   F~[n,h,c,g] = act(h, F[n,c,inverse(h)·g])      (G_in == order)
///   F~[n,h,c,0] = act(h, F[n,c,0])                 (G_in == 1, lifting)
///
/// Returned as flat source indices so the same map drives both the pure
/// expansion and the autograd gather.
pub(crate) fn full_filter_expansion_map(
    spec: &GroupSpec,
    c_out: usize,
    c_in: usize,
    g_in: usize,
    k: usize,
) -> Result<Vec<usize>> {
    if g_in != 1 && g_in != spec.order() {
        return Err(Error::invalid(format!(
            "filter group depth {} must be 1 (lifting) or the group order {}",
            g_in,
            spec.order()
        )));
    }
    let order = spec.order();
    let kk = k * k;
    let kmaps: Vec<Vec<usize>> = (0..order).map(|h| kernel_index_map(spec, h, k)).collect();
    let mut map = Vec::with_capacity(c_out * order * c_in * g_in * kk);
    for n in 0..c_out {
        for h in 0..order {
            let hinv = spec.inverse_idx(h);
            let kmap = &kmaps[h];
            for c in 0..c_in {
                for g in 0..g_in {
                    let gsrc = if g_in == 1 { 0 } else { spec.compose_idx(hinv, g) };
                    let base = ((n * c_in + c) * g_in + gsrc) * kk;
                    map.extend(kmap.iter().map(|&i| base + i));
                }
            }
        }
    }
    Ok(map)
}

/// Expand stored filters into the full equivariant filter bank (see
/// [`full_filter_expansion_map`] for the index rule).
pub fn expand_full_filter<T: Scalar>(spec: &GroupSpec, f: &Tensor<T>) -> Result<Tensor<T>> {
    let s = f.shape();
    if s.len() != 5 || s[3] != s[4] {
        return Err(Error::shape(format!(
            "expand_full_filter wants [C_out,C_in,G_in,k,k], got {:?}",
            s
        )));
    }
    let (c_out, c_in, g_in, k) = (s[0], s[1], s[2], s[3]);
    let map = full_filter_expansion_map(spec, c_out, c_in, g_in, k)?;
    let src = f.data();
    Tensor::new(
        &[c_out, spec.order(), c_in, g_in, k, k],
        map.iter().map(|&i| src[i]).collect(),
    )
}

/// Source map for expanding separable group-mixing weights
/// w [C_out,C_in,G] into w~ [C_out,G_out,C_in,G]:
///
///   w~[n,h,c,g] = w[n,c,inverse(h)·g]
pub(crate) fn pointwise_expansion_map(spec: &GroupSpec, c_out: usize, c_in: usize, g_in: usize) -> Result<Vec<usize>> {
    if g_in != spec.order() {
        return Err(Error::shape(format!(
            "pointwise weights have group depth {}, group order is {}",
            g_in,
            spec.order()
        )));
    }
    let order = spec.order();
    let mut map = Vec::with_capacity(c_out * order * c_in * order);
    for n in 0..c_out {
        for h in 0..order {
            let hinv = spec.inverse_idx(h);
            for c in 0..c_in {
                for g in 0..order {
                    map.push((n * c_in + c) * order + spec.compose_idx(hinv, g));
                }
            }
        }
    }
    Ok(map)
}

/// Expand separable group-mixing weights into their permuted copies (see
/// [`pointwise_expansion_map`]).
pub fn expand_separable_pointwise<T: Scalar>(spec: &GroupSpec, w: &Tensor<T>) -> Result<Tensor<T>> {
    let s = w.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expand_separable_pointwise wants [C_out,C_in,G], got {:?}", s)));
    }
    let map = pointwise_expansion_map(spec, s[0], s[1], s[2])?;
    let src = w.data();
    Tensor::new(&[s[0], spec.order(), s[1], s[2]], map.iter().map(|&i| src[i]).collect())
}

/// Apply the grid action of `g` to the two trailing (spatial) axes of a
/// feature map — the exact 90-degree-rotation/mirror permutation, no
/// interpolation. Spatial extent must be square.
pub fn transform_spatial<T: Scalar>(spec: &GroupSpec, g: GroupElement, x: &Tensor<T>) -> Result<Tensor<T>> {
    let gi = spec.check(g)?;
    if x.rank() < 2 {
        return Err(Error::shape(format!("transform_spatial wants trailing [H,W] axes, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]);
    if h != w {
        return Err(Error::shape(format!("grid rotations need square spatial extent, got {h}x{w}")));
    }
    let map = kernel_index_map(spec, gi, h);
    let hw = h * w;
    let channels = x.numel() / hw;
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for c in 0..channels {
        let src = &xd[c * hw..][..hw];
        let dst = &mut od[c * hw..][..hw];
        for (d, &i) in dst.iter_mut().zip(&map) {
            *d = src[i];
        }
    }
    Ok(out)
}

/// Average a kernel over the whole group orbit, producing a kernel that
/// every group element fixes. Useful for constructing the degenerate
/// filter banks whose expansions collapse to identical copies.
pub fn symmetrize_kernel<T: Scalar>(spec: &GroupSpec, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let mut acc = Tensor::<T>::zeros(kernel.shape());
    for g in spec.elements() {
        let t = act_on_kernel(spec, g, kernel)?;
        acc.scaled_add(T::one(), &t);
    }
    let inv = T::cast(1.0 / spec.order() as f64);
    Ok(acc.map(|v| v * inv))
}
