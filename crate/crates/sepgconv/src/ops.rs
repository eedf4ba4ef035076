//! Numeric kernels: convolution (plain and grouped), pointwise
//! contraction, pooling, normalization, dropout and the classification
//! loss. Pure functions on tensors; the autograd tape in [`crate::graph`]
//! wraps these and adds the backward rules.
//!
//! Convolutions use cross-correlation semantics (no kernel flip). The
//! accumulation order per output element is input-channel, then kernel
//! row, then kernel column, with fused multiply-adds — the same order a
//! naive nested loop uses, so results match a brute-force reference
//! exactly, not just to rounding.

use crate::error::{Error, Result};
use crate::intra_op_threads;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of (k-1)/2 on every border; output keeps the input's
    /// spatial size. Requires odd k.
    Same,
    /// No padding; output shrinks to H-k+1. Any k up to the input size.
    Valid,
}

impl Padding {
    pub fn name(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }
}

/// Validate spatial geometry and return (pad, h_out, w_out).
pub(crate) fn conv_geometry(h: usize, w: usize, k: usize, padding: Padding) -> Result<(usize, usize, usize)> {
    if k == 0 {
        return Err(Error::invalid("kernel size must be positive"));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("empty spatial input {h}x{w}")));
    }
    match padding {
        Padding::Same => {
            if k % 2 == 0 {
                Err(Error::invalid(format!("same-padding requires an odd kernel, got k={k}")))
            } else {
                Ok(((k - 1) / 2, h, w))
            }
        }
        Padding::Valid => {
            if k > h || k > w {
                Err(Error::shape(format!("valid convolution needs k <= spatial size, got k={k} on {h}x{w}")))
            } else {
                Ok((0, h - k + 1, w - k + 1))
            }
        }
    }
}

fn dims<const N: usize>(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; N]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::shape(format!("{what}: expected rank {N}, got shape {:?}", t.shape())))
}

/// Distribute `(index, chunk)` work items over up to `threads` scoped
/// threads. Each item is processed exactly once by exactly one thread, so
/// results are identical for any thread count.
pub(crate) fn for_each_chunk_parallel<T: Send, F>(chunks: Vec<(usize, &mut [T])>, threads: usize, f: &F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    if threads <= 1 || chunks.len() <= 1 {
        for (i, c) in chunks {
            f(i, c);
        }
        return;
    }
    let nt = threads.min(chunks.len());
    let mut buckets: Vec<Vec<(usize, &mut [T])>> = (0..nt).map(|_| Vec::new()).collect();
    for (j, item) in chunks.into_iter().enumerate() {
        buckets[j % nt].push(item);
    }
    std::thread::scope(|s| {
        for bucket in buckets {
            s.spawn(move || {
                for (i, c) in bucket {
                    f(i, c);
                }
            });
        }
    });
}

/// out[oh,ow] += sum_{ki,kj} ker[ki,kj] * x[oh+ki-pad, ow+kj-pad],
/// contributions outside the input skipped (zero padding).
///
/// The (oh,ow) inner loops run over contiguous rows so the fused
/// multiply-add vectorizes; per output element the update order is
/// (ki,kj) lexicographic, matching a naive loop.
#[inline]
pub(crate) fn corr2d_acc<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    ker: &[T],
    k: usize,
    pad: usize,
    out: &mut [T],
    h_out: usize,
    w_out: usize,
) {
    debug_assert_eq!(x.len(), h * w);
    debug_assert_eq!(ker.len(), k * k);
    debug_assert_eq!(out.len(), h_out * w_out);
    for ki in 0..k {
        let oh_lo = pad.saturating_sub(ki);
        let oh_hi = (h + pad).saturating_sub(ki).min(h_out);
        if oh_lo >= oh_hi {
            continue;
        }
        for kj in 0..k {
            let wgt = ker[ki * k + kj];
            let ow_lo = pad.saturating_sub(kj);
            let ow_hi = (w + pad).saturating_sub(kj).min(w_out);
            if ow_lo >= ow_hi {
                continue;
            }
            let len = ow_hi - ow_lo;
            let iw0 = ow_lo + kj - pad;
            for oh in oh_lo..oh_hi {
                let ih = oh + ki - pad;
                let xrow = &x[ih * w + iw0..ih * w + iw0 + len];
                let orow = &mut out[oh * w_out + ow_lo..oh * w_out + ow_lo + len];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o = xv.mul_add(wgt, *o);
                }
            }
        }
    }
}

/// Gradient of `corr2d_acc` with respect to its input:
/// gx[ih,iw] += sum_{ki,kj} ker[ki,kj] * gy[ih-ki+pad, iw-kj+pad].
#[inline]
pub(crate) fn corr2d_grad_input<T: Scalar>(
    gy: &[T],
    h_out: usize,
    w_out: usize,
    ker: &[T],
    k: usize,
    pad: usize,
    gx: &mut [T],
    h: usize,
    w: usize,
) {
    debug_assert_eq!(gy.len(), h_out * w_out);
    debug_assert_eq!(gx.len(), h * w);
    for ki in 0..k {
        let oh_lo = pad.saturating_sub(ki);
        let oh_hi = (h + pad).saturating_sub(ki).min(h_out);
        if oh_lo >= oh_hi {
            continue;
        }
        for kj in 0..k {
            let wgt = ker[ki * k + kj];
            let ow_lo = pad.saturating_sub(kj);
            let ow_hi = (w + pad).saturating_sub(kj).min(w_out);
            if ow_lo >= ow_hi {
                continue;
            }
            let len = ow_hi - ow_lo;
            let iw0 = ow_lo + kj - pad;
            for oh in oh_lo..oh_hi {
                let ih = oh + ki - pad;
                let gxrow = &mut gx[ih * w + iw0..ih * w + iw0 + len];
                let gyrow = &gy[oh * w_out + ow_lo..oh * w_out + ow_lo + len];
                for (g, &gv) in gxrow.iter_mut().zip(gyrow) {
                    *g = gv.mul_add(wgt, *g);
                }
            }
        }
    }
}

/// Dot product with lane-split accumulators so it vectorizes without
/// reassociating a single serial chain.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let whole = a.len() / LANES * LANES;
    let mut i = 0;
    while i < whole {
        for l in 0..LANES {
            acc[l] = a[i + l].mul_add(b[i + l], acc[l]);
        }
        i += LANES;
    }
    let mut s = T::zero();
    for l in 0..LANES {
        s += acc[l];
    }
    for j in whole..a.len() {
        s = a[j].mul_add(b[j], s);
    }
    s
}

/// Gradient of `corr2d_acc` with respect to the kernel:
/// gk[ki,kj] += sum_{oh,ow} gy[oh,ow] * x[oh+ki-pad, ow+kj-pad].
#[inline]
pub(crate) fn corr2d_grad_kernel<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    gy: &[T],
    h_out: usize,
    w_out: usize,
    k: usize,
    pad: usize,
    gk: &mut [T],
) {
    debug_assert_eq!(gk.len(), k * k);
    for ki in 0..k {
        let oh_lo = pad.saturating_sub(ki);
        let oh_hi = (h + pad).saturating_sub(ki).min(h_out);
        if oh_lo >= oh_hi {
            continue;
        }
        for kj in 0..k {
            let ow_lo = pad.saturating_sub(kj);
            let ow_hi = (w + pad).saturating_sub(kj).min(w_out);
            if ow_lo >= ow_hi {
                continue;
            }
            let len = ow_hi - ow_lo;
            let iw0 = ow_lo + kj - pad;
            let mut acc = T::zero();
            for oh in oh_lo..oh_hi {
                let ih = oh + ki - pad;
                let xrow = &x[ih * w + iw0..ih * w + iw0 + len];
                let gyrow = &gy[oh * w_out + ow_lo..oh * w_out + ow_lo + len];
                acc += dot(gyrow, xrow);
            }
            gk[ki * k + kj] += acc;
        }
    }
}

/// Batched 2-D cross-correlation: X [B,C_in,H,W] * F [C_out,C_in,k,k]
/// -> [B,C_out,H',W'].
pub fn conv2d_batched<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    grouped_conv2d_batched(x, f, 1, padding)
}

/// Batched grouped cross-correlation: X [B,C,H,W] * F [C_out,C/g,k,k]
/// with `g_count` groups -> [B,C_out,H',W']. Output group i sees only
/// input group i.
pub fn grouped_conv2d_batched<T: Scalar>(
    x: &Tensor<T>,
    f: &Tensor<T>,
    g_count: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let [b, c_in, h, w] = dims(x, "grouped_conv2d input")?;
    let [c_out, c_per_group, k, k2] = dims(f, "grouped_conv2d filter")?;
    if k != k2 {
        return Err(Error::shape(format!("kernel must be square, got {k}x{k2}")));
    }
    if g_count == 0 {
        return Err(Error::invalid("group count must be positive"));
    }
    if c_in % g_count != 0 || c_out % g_count != 0 {
        return Err(Error::invalid(format!(
            "group count {g_count} must divide input channels {c_in} and output channels {c_out}"
        )));
    }
    if c_per_group != c_in / g_count {
        return Err(Error::shape(format!(
            "filter expects {c_per_group} channels per group, input provides {}",
            c_in / g_count
        )));
    }
    let (pad, h_out, w_out) = conv_geometry(h, w, k, padding)?;
    let out_per_group = c_out / g_count;
    let (hw, hw_out, kk) = (h * w, h_out * w_out, k * k);
    let mut out = Tensor::zeros(&[b, c_out, h_out, w_out]);
    let xd = x.data();
    let fd = f.data();
    let chunks: Vec<(usize, &mut [T])> = out.data_mut().chunks_mut(c_out * hw_out).enumerate().collect();
    for_each_chunk_parallel(chunks, intra_op_threads(), &|bi, out_s: &mut [T]| {
        let xs = &xd[bi * c_in * hw..][..c_in * hw];
        for gi in 0..g_count {
            for col in 0..out_per_group {
                let co = gi * out_per_group + col;
                let orow = &mut out_s[co * hw_out..][..hw_out];
                for cil in 0..c_per_group {
                    let ci = gi * c_per_group + cil;
                    let ker = &fd[(co * c_per_group + cil) * kk..][..kk];
                    corr2d_acc(&xs[ci * hw..][..hw], h, w, ker, k, pad, orow, h_out, w_out);
                }
            }
        }
    });
    Ok(out)
}

/// Single-image 2-D cross-correlation: X [C_in,H,W] * F [C_out,C_in,k,k].
pub fn conv2d<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    grouped_conv2d(x, f, 1, padding)
}

/// Single-image grouped cross-correlation (see the batched variant).
pub fn grouped_conv2d<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>, g_count: usize, padding: Padding) -> Result<Tensor<T>> {
    let [c, h, w] = dims(x, "grouped_conv2d input")?;
    let y = grouped_conv2d_batched(&x.reshape(&[1, c, h, w])?, f, g_count, padding)?;
    let ys = y.shape().to_vec();
    y.reshape(&[ys[1], ys[2], ys[3]])
}

/// Contract the trailing axes of `w` against the leading axes of `x`:
///
///   out[i..., j...] = sum_{t...} w[i..., t...] * x[t..., j...]
///
/// with `n_contracted` axes t. For X [C,G,H,W] and W [C',G',C,G] this is
/// the per-pixel weighted sum over channels and group slots — a 1x1
/// convolution over the flattened channel-group axes.
pub fn pointwise_contract<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, n_contracted: usize) -> Result<Tensor<T>> {
    if n_contracted > x.rank() || n_contracted > w.rank() {
        return Err(Error::shape(format!(
            "cannot contract {n_contracted} axes of shapes {:?} and {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let w_keep = &w.shape()[..w.rank() - n_contracted];
    let w_contr = &w.shape()[w.rank() - n_contracted..];
    let x_contr = &x.shape()[..n_contracted];
    let x_keep = &x.shape()[n_contracted..];
    if w_contr != x_contr {
        return Err(Error::shape(format!(
            "contracted axes disagree: {:?} (weight) vs {:?} (input)",
            w_contr, x_contr
        )));
    }
    let m: usize = w_keep.iter().product();
    let t: usize = w_contr.iter().product();
    let n: usize = x_keep.iter().product();
    let mut out_shape = w_keep.to_vec();
    out_shape.extend_from_slice(x_keep);
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let wd = w.data();
    let xd = x.data();
    for i in 0..m {
        let orow = &mut od[i * n..][..n];
        for tt in 0..t {
            let coef = wd[i * t + tt];
            let xrow = &xd[tt * n..][..n];
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o = xv.mul_add(coef, *o);
            }
        }
    }
    Ok(out)
}

/// Elementwise max(x, 0).
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// 2x2 max pooling with stride 2 on [B,C,H,W]; also records the flat
/// input index of each selected element (first occurrence wins ties) for
/// the backward pass.
pub(crate) fn maxpool2x2_with_argmax<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = dims(x, "maxpool2d input")?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("maxpool2d needs spatial size >= 2, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut argmax = vec![0usize; out.numel()];
    let xd = x.data();
    let od = out.data_mut();
    for bc in 0..b * c {
        let base = bc * h * w;
        let obase = bc * ho * wo;
        for oh in 0..ho {
            for ow in 0..wo {
                let i0 = base + (2 * oh) * w + 2 * ow;
                let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cands[0];
                let mut best_v = xd[best];
                for &i in &cands[1..] {
                    if xd[i] > best_v {
                        best = i;
                        best_v = xd[i];
                    }
                }
                od[obase + oh * wo + ow] = best_v;
                argmax[obase + oh * wo + ow] = best;
            }
        }
    }
    Ok((out, argmax))
}

/// 2x2/stride-2 max pooling on a single image [C,H,W]. Odd trailing rows
/// or columns are dropped.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = dims(x, "maxpool2d input")?;
    let (y, _) = maxpool2x2_with_argmax(&x.reshape(&[1, c, h, w])?)?;
    let ys = y.shape().to_vec();
    y.reshape(&[ys[1], ys[2], ys[3]])
}

/// Everything the batchnorm backward pass needs, saved at forward time.
pub(crate) struct BnForward<T> {
    pub y: Tensor<T>,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (1/N) variance per channel.
    pub var: Vec<T>,
}

/// Training-mode batch normalization over channel axis 1 of [B,C,...]:
/// statistics pool over the batch and every axis right of the channel
/// axis. On [B,C,G,H,W] feature maps the group axis is therefore pooled
/// too, which is what keeps normalization commuting with group
/// permutations.
pub(crate) fn batchnorm_forward<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<BnForward<T>> {
    if x.rank() < 2 {
        return Err(Error::shape(format!("batchnorm input needs rank >= 2, got {:?}", x.shape())));
    }
    let b = x.shape()[0];
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batchnorm affine parameters want {c} channels, got gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let n = b * inner;
    if n == 0 {
        return Err(Error::invalid("batchnorm over an empty batch"));
    }
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        let mut s2 = 0.0f64;
        for bi in 0..b {
            let row = &xd[(bi * c + ch) * inner..][..inner];
            for &v in row {
                let v = v.as_f64();
                s += v;
                s2 += v * v;
            }
        }
        let m = s / n as f64;
        let v = (s2 / n as f64 - m * m).max(0.0);
        mean[ch] = T::cast(m);
        var[ch] = T::cast(v);
        inv_std[ch] = T::cast(1.0 / (v + eps).sqrt());
    }
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    {
        let xh = x_hat.data_mut();
        let yd = y.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                for i in off..off + inner {
                    let h = (xd[i] - mu) * is;
                    xh[i] = h;
                    yd[i] = h * ga + be;
                }
            }
        }
    }
    Ok(BnForward { y, x_hat, inv_std, mean, var })
}

/// Training-mode batchnorm; returns (y, per-channel mean, per-channel
/// biased variance).
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let fwd = batchnorm_forward(x, gamma.data(), beta.data(), eps)?;
    let c = fwd.mean.len();
    Ok((
        fwd.y,
        Tensor::new(&[c], fwd.mean)?,
        Tensor::new(&[c], fwd.var)?,
    ))
}

/// Inference-mode batchnorm using stored statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape(format!("batchnorm input needs rank >= 2, got {:?}", x.shape())));
    }
    let b = x.shape()[0];
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    for (t, name) in [(gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")] {
        if t.numel() != c {
            return Err(Error::shape(format!("batchnorm {name} wants {c} values, got {}", t.numel())));
        }
    }
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for bi in 0..b {
        for ch in 0..c {
            let is = T::cast(1.0 / (var.data()[ch].as_f64() + eps).sqrt());
            let (mu, ga, be) = (mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
            let off = (bi * c + ch) * inner;
            for i in off..off + inner {
                yd[i] = (xd[i] - mu) * is * ga + be;
            }
        }
    }
    Ok(y)
}

/// Inverted-dropout mask: each entry is 0 with probability p, else
/// 1/(1-p), so the expected value of masked activations is unchanged.
pub fn dropout_mask<T: Scalar>(n: usize, p: f64, rng: &mut impl rand::Rng) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must be in [0,1), got {p}")));
    }
    let keep = T::cast(1.0 / (1.0 - p));
    Ok((0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect())
}

/// Seeded inverted dropout.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, rng: &mut impl rand::Rng) -> Result<Tensor<T>> {
    let mask = dropout_mask::<T>(x.numel(), p, rng)?;
    let mut y = x.clone();
    for (v, m) in y.data_mut().iter_mut().zip(&mask) {
        *v = *v * *m;
    }
    Ok(y)
}

/// Mean softmax cross-entropy over a batch. Logits are [B,K] (or [K]
/// with a single label); returns (loss, softmax probabilities).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, kcls) = match *logits.shape() {
        [k] => (1, k),
        [b, k] => (b, k),
        _ => {
            return Err(Error::shape(format!(
                "softmax_cross_entropy wants [K] or [B,K] logits, got {:?}",
                logits.shape()
            )))
        }
    };
    if kcls == 0 {
        return Err(Error::shape("softmax over zero classes"));
    }
    if labels.len() != b {
        return Err(Error::shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    for &l in labels {
        if l >= kcls {
            return Err(Error::invalid(format!("label {l} out of range for {kcls} classes")));
        }
    }
    let mut probs = Tensor::zeros(logits.shape());
    let xd = logits.data();
    let pd = probs.data_mut();
    let mut total = 0.0f64;
    for bi in 0..b {
        let row = &xd[bi * kcls..][..kcls];
        let m = row.iter().cloned().fold(row[0], T::max);
        let mut z = 0.0f64;
        for &v in row {
            z += (v - m).as_f64().exp();
        }
        let prow = &mut pd[bi * kcls..][..kcls];
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = T::cast((v - m).as_f64().exp() / z);
        }
        total += z.ln() - (row[labels[bi]] - m).as_f64();
    }
    Ok((T::cast(total / b as f64), probs))
}

/// Sum of all elements, in row-major order.
pub fn sum<T: Scalar>(x: &Tensor<T>) -> T {
    x.data().iter().fold(T::zero(), |a, &b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rnd(shape: &[usize], rng: &mut StdRng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Six-nested-loop reference convolution with explicit bounds checks,
    /// fused multiply-add like the production kernel.
    fn conv2d_naive(x: &Tensor<f64>, f: &Tensor<f64>, padding: Padding) -> Tensor<f64> {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, k) = (f.shape()[0], f.shape()[2]);
        let (pad, h_out, w_out) = conv_geometry(h, w, k, padding).unwrap();
        Tensor::from_fn(&[c_out, h_out, w_out], |idx| {
            let (co, oh, ow) = (idx[0], idx[1], idx[2]);
            let mut acc = 0.0f64;
            for ci in 0..c_in {
                for ki in 0..k {
                    for kj in 0..k {
                        let (ih, iw) = (oh + ki, ow + kj);
                        if ih >= pad && iw >= pad && ih - pad < h && iw - pad < w {
                            acc = f.at(&[co, ci, ki, kj]).mul_add(x.at(&[ci, ih - pad, iw - pad]), acc);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let f = Tensor::new(&[1, 1, 1, 1], vec![1.0f64]).unwrap();
        let y = conv2d(&x, &f, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_filter_gives_zero_output() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = rnd(&[2, 5, 5], &mut rng);
        let f = Tensor::<f64>::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &f, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[3, 5, 5]);
    }

    #[test]
    fn conv2d_matches_naive_loops_exactly() {
        let mut rng = StdRng::seed_from_u64(7);
        for &padding in &[Padding::Same, Padding::Valid] {
            for _ in 0..20 {
                let c_in = rng.gen_range(1..=4);
                let c_out = rng.gen_range(1..=4);
                let k = [1, 3, 5][rng.gen_range(0..3)];
                let h = rng.gen_range(k..=7);
                let w = rng.gen_range(k..=7);
                let x = rnd(&[c_in, h, w], &mut rng);
                let f = rnd(&[c_out, c_in, k, k], &mut rng);
                let fast = conv2d(&x, &f, padding).unwrap();
                let slow = conv2d_naive(&x, &f, padding);
                assert_eq!(fast, slow, "c_in={c_in} c_out={c_out} k={k} h={h} w={w} {padding:?}");
            }
        }
    }

    #[test]
    fn valid_padding_accepts_even_kernels() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = rnd(&[2, 6, 6], &mut rng);
        let f = rnd(&[3, 2, 4, 4], &mut rng);
        let y = conv2d(&x, &f, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        assert_eq!(y, conv2d_naive(&x, &f, Padding::Valid));
    }

    #[test]
    fn same_padding_rejects_even_kernels() {
        let x = Tensor::<f64>::zeros(&[1, 6, 6]);
        let f = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let err = conv2d(&x, &f, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("odd kernel"), "got: {err}");
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_oversized_kernels() {
        let x = Tensor::<f64>::zeros(&[2, 5, 5]);
        assert!(conv2d(&x, &Tensor::<f64>::zeros(&[3, 4, 3, 3]), Padding::Same).is_err());
        assert!(conv2d(&x, &Tensor::<f64>::zeros(&[3, 2, 7, 7]), Padding::Valid).is_err());
    }

    #[test]
    fn grouped_conv_with_one_group_is_conv2d() {
        let mut rng = StdRng::seed_from_u64(13);
        let x = rnd(&[4, 6, 6], &mut rng);
        let f = rnd(&[6, 4, 3, 3], &mut rng);
        let a = conv2d(&x, &f, Padding::Same).unwrap();
        let b = grouped_conv2d(&x, &f, 1, Padding::Same).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn depthwise_identity_kernels_pass_channels_through() {
        let mut rng = StdRng::seed_from_u64(17);
        let x = rnd(&[5, 4, 4], &mut rng);
        let f = Tensor::<f64>::full(&[5, 1, 1, 1], 1.0);
        let y = grouped_conv2d(&x, &f, 5, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn grouped_conv_matches_per_group_loops() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..10 {
            let g = [1, 2, 3][rng.gen_range(0..3)];
            let cpg = rng.gen_range(1..=3);
            let opg = rng.gen_range(1..=3);
            let (c_in, c_out) = (g * cpg, g * opg);
            let k = 3;
            let h = rng.gen_range(3..=6);
            let x = rnd(&[c_in, h, h], &mut rng);
            let f = rnd(&[c_out, cpg, k, k], &mut rng);
            let fast = grouped_conv2d(&x, &f, g, Padding::Valid).unwrap();
            // reference: run plain conv2d per group on the channel slices
            let h_out = h - k + 1;
            for gi in 0..g {
                let xs = Tensor::from_fn(&[cpg, h, h], |i| x.at(&[gi * cpg + i[0], i[1], i[2]]));
                let fs = Tensor::from_fn(&[opg, cpg, k, k], |i| f.at(&[gi * opg + i[0], i[1], i[2], i[3]]));
                let ys = conv2d_naive(&xs, &fs, Padding::Valid);
                for col in 0..opg {
                    for oh in 0..h_out {
                        for ow in 0..h_out {
                            assert_eq!(fast.at(&[gi * opg + col, oh, ow]), ys.at(&[col, oh, ow]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn grouped_conv_rejects_nondivisible_groups() {
        let x = Tensor::<f64>::zeros(&[4, 5, 5]);
        let f = Tensor::<f64>::zeros(&[6, 2, 3, 3]);
        assert!(grouped_conv2d(&x, &f, 3, Padding::Same).is_err());
        assert!(grouped_conv2d(&x, &f, 0, Padding::Same).is_err());
    }

    #[test]
    fn pointwise_contract_one_hot_selects_a_slice() {
        let mut rng = StdRng::seed_from_u64(23);
        let x = rnd(&[4, 3, 3], &mut rng);
        let mut w = Tensor::<f64>::zeros(&[1, 4]);
        w.set(&[0, 2], 1.0);
        let y = pointwise_contract(&x, &w, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y.at(&[0, i, j]), x.at(&[2, i, j]));
            }
        }
    }

    #[test]
    fn pointwise_contract_all_ones_sums_the_axis() {
        let mut rng = StdRng::seed_from_u64(29);
        let x = rnd(&[4, 2, 2], &mut rng);
        let w = Tensor::<f64>::full(&[4], 1.0);
        let y = pointwise_contract(&x, &w, 1).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..4).fold(0.0, |a, c| x.at(&[c, i, j]).mul_add(1.0, a));
                assert_eq!(y.at(&[i, j]), want);
            }
        }
    }

    #[test]
    fn pointwise_contract_matches_explicit_summation() {
        let mut rng = StdRng::seed_from_u64(31);
        let x = rnd(&[3, 4, 2, 2], &mut rng); // [C,G,H,W]
        let w = rnd(&[2, 5, 3, 4], &mut rng); // [C',G',C,G]
        let y = pointwise_contract(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), &[2, 5, 2, 2]);
        for n in 0..2 {
            for hh in 0..5 {
                for i in 0..2 {
                    for j in 0..2 {
                        let mut acc = 0.0f64;
                        for c in 0..3 {
                            for g in 0..4 {
                                acc = w.at(&[n, hh, c, g]).mul_add(x.at(&[c, g, i, j]), acc);
                            }
                        }
                        assert_eq!(y.at(&[n, hh, i, j]), acc);
                    }
                }
            }
        }
    }

    #[test]
    fn pointwise_contract_rejects_axis_mismatch() {
        let x = Tensor::<f64>::zeros(&[3, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 4]);
        assert!(pointwise_contract(&x, &w, 1).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(&[3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_takes_window_maxima() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_drops_odd_edges() {
        let x = Tensor::<f64>::from_fn(&[1, 5, 5], |i| (i[1] * 5 + i[2]) as f64);
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.at(&[0, 1, 1]), 18.0); // max of rows 2-3, cols 2-3
    }

    #[test]
    fn batchnorm_normalizes_each_channel() {
        let mut rng = StdRng::seed_from_u64(37);
        let x = rnd(&[4, 3, 2, 5], &mut rng);
        let gamma = Tensor::<f64>::full(&[3], 1.0);
        let beta = Tensor::<f64>::zeros(&[3]);
        let (y, mean, var) = batchnorm_train(&x, &gamma, &beta, 1e-8).unwrap();
        // per-channel output statistics are ~N(0,1)
        for ch in 0..3 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            let mut n = 0.0;
            for bi in 0..4 {
                for g in 0..2 {
                    for i in 0..5 {
                        let v = y.at(&[bi, ch, g, i]);
                        s += v;
                        s2 += v * v;
                        n += 1.0;
                    }
                }
            }
            assert!((s / n).abs() < 1e-9);
            assert!((s2 / n - 1.0).abs() < 1e-6);
            assert!(var.at(&[ch]) >= 0.0);
        }
        // eval mode with the batch statistics reproduces train mode
        let ye = batchnorm_eval(&x, &gamma, &beta, &mean, &var, 1e-8).unwrap();
        assert!(y.max_abs_diff(&ye) < 1e-12);
    }

    #[test]
    fn batchnorm_applies_affine_parameters() {
        let x = Tensor::new(&[2, 1, 2], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        let gamma = Tensor::new(&[1], vec![2.0f64]).unwrap();
        let beta = Tensor::new(&[1], vec![10.0f64]).unwrap();
        let (y, _, _) = batchnorm_train(&x, &gamma, &beta, 0.0).unwrap();
        let m: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!((m - 10.0).abs() < 1e-9);
    }

    #[test]
    fn dropout_is_seeded_and_rescales() {
        let x = Tensor::<f64>::full(&[1000], 1.0);
        let mut r1 = StdRng::seed_from_u64(5);
        let mut r2 = StdRng::seed_from_u64(5);
        let y1 = dropout(&x, 0.3, &mut r1).unwrap();
        let y2 = dropout(&x, 0.3, &mut r2).unwrap();
        assert_eq!(y1, y2);
        let kept = y1.data().iter().filter(|&&v| v != 0.0).count();
        assert!((500..900).contains(&kept), "kept {kept} of 1000 at p=0.3");
        for &v in y1.data() {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
        }
        assert!(dropout(&x, 1.0, &mut r1).is_err());
        assert!(dropout(&x, -0.1, &mut r1).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_nclasses() {
        let logits = Tensor::<f64>::full(&[4, 10], 0.37);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
        assert!((probs.at(&[2, 4]) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    }

    #[test]
    fn conv_is_linear_in_the_input() {
        let mut rng = StdRng::seed_from_u64(41);
        let x = rnd(&[2, 5, 5], &mut rng);
        let y = rnd(&[2, 5, 5], &mut rng);
        let f = rnd(&[3, 2, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let mut lin = x.clone();
        lin.data_mut().iter_mut().zip(y.data()).for_each(|(v, &u)| *v = a * *v + b * u);
        let lhs = conv2d(&lin, &f, Padding::Same).unwrap();
        let mut rhs = conv2d(&x, &f, Padding::Same).unwrap();
        let cy = conv2d(&y, &f, Padding::Same).unwrap();
        rhs.data_mut().iter_mut().zip(cy.data()).for_each(|(v, &u)| *v = a * *v + b * u);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn threaded_conv_matches_serial_exactly() {
        // determinism across thread counts: same disjoint work per sample
        let mut rng = StdRng::seed_from_u64(43);
        let x = rnd(&[6, 3, 8, 8], &mut rng);
        let f = rnd(&[4, 3, 3, 3], &mut rng);
        let serial = conv2d_batched(&x, &f, Padding::Same).unwrap();
        let mut out = serial.clone();
        out.fill(0.0);
        let xd = x.data();
        let fd = f.data();
        let chunks: Vec<(usize, &mut [f64])> = out.data_mut().chunks_mut(4 * 64).enumerate().collect();
        for_each_chunk_parallel(chunks, 3, &|bi, out_s: &mut [f64]| {
            let xs = &xd[bi * 3 * 64..][..3 * 64];
            for co in 0..4 {
                for ci in 0..3 {
                    corr2d_acc(&xs[ci * 64..][..64], 8, 8, &fd[(co * 3 + ci) * 9..][..9], 3, 1, &mut out_s[co * 64..][..64], 8, 8);
                }
            }
        });
        assert_eq!(out, serial);
    }
}
