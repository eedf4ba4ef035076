//! Shared oracles for the acceptance and property suites. Everything
//! here is written as plainly as possible — literal loop nests and the
//! textbook definitions — so the fast library paths are checked against
//! independent arithmetic, not against themselves.

// each test target compiles its own copy and uses a different subset
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sepgconv::cost::{LayerKind, LayerShape};
use sepgconv::graph::{Graph, NodeId};
use sepgconv::group::{act_on_kernel, GroupSpec};
use sepgconv::layers::ParamBinds;
use sepgconv::ops::Padding;
use sepgconv::{Result, Tensor};

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Plain cross-correlation of one [H,W] image with one [k,k] kernel,
/// written as the four-deep loop from the definition.
pub fn corr2d_local(img: &Tensor<f64>, ker: &Tensor<f64>, padding: Padding) -> Tensor<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let k = ker.shape()[0];
    let (pad, oh, ow) = match padding {
        Padding::Same => ((k - 1) / 2, h, w),
        Padding::Valid => (0, h - k + 1, w - k + 1),
    };
    let mut out = Tensor::<f64>::zeros(&[oh, ow]);
    for u in 0..oh {
        for v in 0..ow {
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let (r, c) = (u + i, v + j);
                    if r < pad || c < pad {
                        continue;
                    }
                    let (r, c) = (r - pad, c - pad);
                    if r < h && c < w {
                        acc += img.at(&[r, c]) * ker.at(&[i, j]);
                    }
                }
            }
            out.set(&[u, v], acc);
        }
    }
    out
}

fn kernel_slice(f: &Tensor<f64>, n: usize, c: usize, g: usize) -> Tensor<f64> {
    let k = f.shape()[f.rank() - 1];
    Tensor::from_fn(&[k, k], |idx| f.at(&[n, c, g, idx[0], idx[1]]))
}

/// Group convolution straight from its definition: the output for
/// element `h` correlates the input with the transformed filters
/// `act(h, F[n, c, h^-1 g])`, summed over input channels and group
/// positions. Input [C,G_in,H,W] (G_in = 1 lifts a plain image),
/// filters [C_out,C_in,G_in,k,k], output [C_out,G_out,H',W'].
pub fn oracle_gconv(
    spec: &GroupSpec,
    filters: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    x: &Tensor<f64>,
    padding: Padding,
) -> Result<Tensor<f64>> {
    let order = spec.order();
    let (c_out, c_in, g_in) = (filters.shape()[0], filters.shape()[1], filters.shape()[2]);
    assert_eq!(x.shape()[0], c_in);
    assert_eq!(x.shape()[1], g_in);
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let k = filters.shape()[4];
    let (oh, ow) = match padding {
        Padding::Same => (h, w),
        Padding::Valid => (h - k + 1, w - k + 1),
    };

    let mut out = Tensor::<f64>::zeros(&[c_out, order, oh, ow]);
    for n in 0..c_out {
        for hi in 0..order {
            let h_el = spec.element(hi)?;
            let h_inv = spec.inverse(h_el)?;
            let mut acc = Tensor::<f64>::zeros(&[oh, ow]);
            for c in 0..c_in {
                for gi in 0..g_in {
                    // for a lifting layer the group axis is trivial and
                    // h^-1 g indexes the only slice there is
                    let src = if g_in == 1 {
                        0
                    } else {
                        spec.compose(h_inv, spec.element(gi)?)?.index()
                    };
                    let ker = act_on_kernel(spec, h_el, &kernel_slice(filters, n, c, src))?;
                    let img = Tensor::from_fn(&[h, w], |idx| x.at(&[c, gi, idx[0], idx[1]]));
                    let part = corr2d_local(&img, &ker, padding);
                    for (a, &b) in acc.data_mut().iter_mut().zip(part.data()) {
                        *a += b;
                    }
                }
            }
            let b = bias.map_or(0.0, |bt| bt.at(&[n]));
            for u in 0..oh {
                for v in 0..ow {
                    out.set(&[n, hi, u, v], acc.at(&[u, v]) + b);
                }
            }
        }
    }
    Ok(out)
}

/// Multiply-accumulate count from literal loop nests mirroring each
/// layer algorithm, one `+= 1` per tap. The closed-form count in the
/// cost model has to match this exactly.
pub fn counted_macs(shape: &LayerShape) -> u128 {
    let LayerShape { kind, c_in, c_out, g_in, g_out, k, h, w } = *shape;
    let mut count: u128 = 0;
    let positions = |count: &mut u128, taps: usize| {
        for _ in 0..h {
            for _ in 0..w {
                *count += taps as u128;
            }
        }
    };
    match kind {
        LayerKind::Regular => {
            for _n in 0..c_out {
                positions(&mut count, c_in * k * k);
            }
        }
        LayerKind::LiftingGconv | LayerKind::FullGconv => {
            for _n in 0..c_out {
                for _h in 0..g_out {
                    positions(&mut count, c_in * g_in * k * k);
                }
            }
        }
        LayerKind::GSep => {
            // stage 1: grouped 1x1 over the group axis
            for _c in 0..c_in {
                for _n in 0..c_out {
                    for _h in 0..g_out {
                        positions(&mut count, g_in);
                    }
                }
            }
            // stage 2: grouped spatial conv, one k x k tap set per
            // (out-channel, group, in-channel)
            for _n in 0..c_out {
                for _h in 0..g_out {
                    positions(&mut count, c_in * k * k);
                }
            }
        }
        LayerKind::GcSep => {
            // stage 1: full 1x1 mixing all (c, g) pairs
            for _n in 0..c_out {
                for _h in 0..g_out {
                    positions(&mut count, c_in * g_in);
                }
            }
            // stage 2: depthwise spatial conv
            for _n in 0..c_out {
                for _h in 0..g_out {
                    positions(&mut count, k * k);
                }
            }
        }
        LayerKind::DepthwiseSep => {
            for _c in 0..c_in {
                positions(&mut count, k * k);
            }
            for _c in 0..c_in {
                positions(&mut count, c_out);
            }
        }
    }
    count
}

/// Loss = sum(r ⊙ layer(x)) evaluated on the tape, returning the loss
/// and d loss / d parameter for every parameter the forward bound, in
/// binding order. `r` fixes a random linear functional so every output
/// element influences the scalar.
pub fn loss_and_grads(
    fwd: &dyn Fn(&mut Graph<f64>, NodeId, &mut ParamBinds) -> Result<NodeId>,
    x: &Tensor<f64>,
    r: &Tensor<f64>,
) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let mut binds = ParamBinds::new();
    let y = fwd(&mut g, xi, &mut binds).expect("forward failed");
    let ri = g.input(r.clone());
    let prod = g.mul(y, ri).expect("mul failed");
    let s = g.sum(prod);
    let loss = g.value(s).data()[0];
    let mut grads = g.backward(s).expect("backward failed");
    let out = binds
        .nodes
        .iter()
        .map(|&n| {
            let shape = g.value(n).shape().to_vec();
            grads.take(n).unwrap_or_else(|| Tensor::zeros(&shape))
        })
        .collect();
    (loss, out)
}

/// Shape of `layer(x)` under the same forward, for sizing `r`.
pub fn forward_shape(
    fwd: &dyn Fn(&mut Graph<f64>, NodeId, &mut ParamBinds) -> Result<NodeId>,
    x: &Tensor<f64>,
) -> Vec<usize> {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let mut binds = ParamBinds::new();
    let y = fwd(&mut g, xi, &mut binds).expect("forward failed");
    g.value(y).shape().to_vec()
}

pub fn relative_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// A 3x3 kernel invariant under every rotation and flip: constant on
/// the center, edge-midpoint, and corner orbits.
pub fn invariant_kernel(center: f64, edge: f64, corner: f64) -> Tensor<f64> {
    Tensor::new(
        &[3, 3],
        vec![corner, edge, corner, edge, center, edge, corner, edge, corner],
    )
    .unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
