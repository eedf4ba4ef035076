//! Filter-bank redundancy measurements along the group axis.
//!
//! A full group-convolution bank stores, for every (output, input)
//! channel pair, a stack of G spatial kernels. After training these
//! stacks tend to be nearly rank one: each member is close to a scalar
//! multiple of a shared kernel. `pc1_ratio` quantifies that (fraction of
//! variance captured by the first principal component of the G x k^2
//! stack), and `rank1_project` extracts the best shared-kernel /
//! per-group-weight factorization, which is exactly the parameter layout
//! of the gc-separable layer.
//!
//! All numerics run in f64 on tiny matrices (G <= 8 rows, k^2 <= 25
//! columns), using a one-sided Jacobi SVD so there is no linear-algebra
//! dependency.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Treat σ² sums below this as an all-zero stack.
const ZERO_EPS: f64 = 1e-20;

/// Orthogonalize the columns of `cols` in place with Jacobi rotations.
/// On return the column norms are the singular values of the original
/// matrix. When `accum` is given (an identity basis), the same rotations
/// are applied to it, so its columns become the matching singular
/// vectors on the rotated side.
fn one_sided_jacobi(cols: &mut [Vec<f64>], mut accum: Option<&mut [Vec<f64>]>) {
    let n = cols.len();
    if n < 2 {
        return;
    }
    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (a, b, c) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut c = 0.0;
                    for i in 0..cp.len() {
                        a += cp[i] * cp[i];
                        b += cq[i] * cq[i];
                        c += cp[i] * cq[i];
                    }
                    (a, b, c)
                };
                if c.abs() <= tol * (a * b).sqrt() || a == 0.0 || b == 0.0 {
                    continue;
                }
                rotated = true;
                let tau = (b - a) / (2.0 * c);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * cs;
                let rotate = |m: &mut [Vec<f64>]| {
                    for i in 0..m[p].len() {
                        let vp = m[p][i];
                        let vq = m[q][i];
                        m[p][i] = cs * vp - sn * vq;
                        m[q][i] = sn * vp + cs * vq;
                    }
                };
                rotate(cols);
                if let Some(basis) = accum.as_deref_mut() {
                    rotate(basis);
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

/// One filter stack as column vectors of its transpose: `g` columns of
/// length k^2, optionally with the mean kernel subtracted.
fn stack_columns<T: Scalar>(f: &Tensor<T>, set: usize, g: usize, kk: usize, centered: bool) -> Vec<Vec<f64>> {
    let base = set * g * kk;
    let data = f.data();
    let mut cols: Vec<Vec<f64>> =
        (0..g).map(|gi| (0..kk).map(|i| data[base + gi * kk + i].as_f64()).collect()).collect();
    if centered {
        for i in 0..kk {
            let mean = cols.iter().map(|c| c[i]).sum::<f64>() / g as f64;
            for c in cols.iter_mut() {
                c[i] -= mean;
            }
        }
    }
    cols
}

fn check_bank<T: Scalar>(f: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let s = f.shape();
    if s.len() != 5 || s[3] != s[4] {
        return Err(Error::shape(format!("filter bank wants [C_out,C_in,G,k,k], got {:?}", s)));
    }
    if s[2] < 2 {
        return Err(Error::invalid(format!("group depth {} too small to measure redundancy", s[2])));
    }
    if s[3] == 0 {
        return Err(Error::invalid("zero-sized kernels"));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Fraction of variance explained by the first principal component of
/// each G x k^2 filter stack, one value per (output, input) channel
/// pair in row-major order. `centered` subtracts the mean kernel first;
/// the default (false) treats raw kernels as the observations, under
/// which identical — or sign-flipped — copies score exactly 1. Stacks
/// with (near-)zero total variance score 1 (fully redundant).
pub fn pc1_ratio<T: Scalar>(f: &Tensor<T>, centered: bool) -> Result<Vec<f64>> {
    let (c_out, c_in, g, k) = check_bank(f)?;
    let kk = k * k;
    let mut ratios = Vec::with_capacity(c_out * c_in);
    for set in 0..c_out * c_in {
        let mut cols = stack_columns(f, set, g, kk, centered);
        one_sided_jacobi(&mut cols, None);
        let mut total = 0.0f64;
        let mut top = 0.0f64;
        for c in &cols {
            let s2: f64 = c.iter().map(|v| v * v).sum();
            total += s2;
            top = top.max(s2);
        }
        ratios.push(if total < ZERO_EPS { 1.0 } else { top / total });
    }
    Ok(ratios)
}

/// Best per-stack rank-1 factorization of a filter bank:
/// F[n,c,g] ~= w[n,c,g] * K[n,c], least squares. K is returned with unit
/// Frobenius norm (sign fixed so its largest-magnitude entry is
/// positive) and w carries the scale. The residual is the relative
/// Frobenius error over the whole bank, zero for an all-zero bank.
pub fn rank1_project<T: Scalar>(f: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, f64)> {
    let (c_out, c_in, g, k) = check_bank(f)?;
    let kk = k * k;
    let mut kernels = Tensor::<T>::zeros(&[c_out, c_in, k, k]);
    let mut weights = Tensor::<T>::zeros(&[c_out, c_in, g]);
    let mut err2 = 0.0;
    let mut norm2 = 0.0;
    for set in 0..c_out * c_in {
        let mut cols = stack_columns(f, set, g, kk, false);
        // basis starts as the identity over the g stack slots; the
        // rotations turn its columns into the per-group weight directions
        let mut basis: Vec<Vec<f64>> =
            (0..g).map(|j| (0..g).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        one_sided_jacobi(&mut cols, Some(&mut basis));

        let norms2: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        let total: f64 = norms2.iter().sum();
        norm2 += total;
        if total < ZERO_EPS {
            continue; // zero stack: K = 0, w = 0, exact
        }
        let best = norms2
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        let sigma = norms2[best].sqrt();
        err2 += total - norms2[best];

        // unit kernel direction, deterministic sign
        let mut kdir: Vec<f64> = cols[best].iter().map(|v| v / sigma).collect();
        let lead = kdir.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let flip = if lead < 0.0 { -1.0 } else { 1.0 };
        for v in kdir.iter_mut() {
            *v *= flip;
        }
        for (i, v) in kdir.iter().enumerate() {
            kernels.data_mut()[set * kk + i] = T::cast(*v);
        }
        for gi in 0..g {
            weights.data_mut()[set * g + gi] = T::cast(flip * sigma * basis[best][gi]);
        }
    }
    let residual = if norm2 < ZERO_EPS { 0.0 } else { (err2.max(0.0) / norm2).sqrt() };
    Ok((kernels, weights, residual))
}

/// Counts of `ratios` over `n_bins` equal-width bins spanning [0, 1];
/// values at 1.0 land in the last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn layer_histogram(ratios: &[f64], n_bins: usize) -> Histogram {
    let n_bins = n_bins.max(1);
    let edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
    let mut counts = vec![0usize; n_bins];
    for &r in ratios {
        let bin = ((r * n_bins as f64).floor() as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    Histogram { edges, counts }
}

/// Redundancy summary for one layer's filter bank.
#[derive(Clone, Debug)]
pub struct RedundancyReport {
    pub layer: String,
    /// One PC1 ratio per (output, input) channel pair, row-major.
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
    /// Stacks with (near-)zero total variance, reported as ratio 1.
    pub degenerate_sets: usize,
    pub histogram: Histogram,
}

impl RedundancyReport {
    pub fn measure<T: Scalar>(layer: impl Into<String>, f: &Tensor<T>, centered: bool, n_bins: usize) -> Result<Self> {
        let (_, c_in, g, k) = check_bank(f)?;
        let kk = k * k;
        let ratios = pc1_ratio(f, centered)?;
        let mut degenerate = 0;
        for set in 0..ratios.len() {
            let base = set * g * kk;
            let total: f64 = f.data()[base..base + g * kk].iter().map(|v| v.as_f64() * v.as_f64()).sum();
            if total < ZERO_EPS {
                degenerate += 1;
            }
        }
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
        let histogram = layer_histogram(&ratios, n_bins);
        let _ = c_in;
        Ok(RedundancyReport { layer: layer.into(), ratios, mean_ratio, degenerate_sets: degenerate, histogram })
    }

    /// `layer,n,c,ratio` rows; n and c recover the (output, input) pair
    /// from the row-major ratio order.
    pub fn ratios_csv(&self, c_in: usize) -> String {
        let mut out = String::from("layer,n,c,ratio\n");
        for (i, r) in self.ratios.iter().enumerate() {
            out.push_str(&format!("{},{},{},{:.9}\n", self.layer, i / c_in, i % c_in, r));
        }
        out
    }

    /// `bin_lo,bin_hi,count` rows.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.histogram.counts.iter().enumerate() {
            out.push_str(&format!(
                "{:.4},{:.4},{}\n",
                self.histogram.edges[i],
                self.histogram.edges[i + 1],
                c
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn bank_from_stacks(stacks: &[Vec<f64>], g: usize, k: usize) -> Tensor<f64> {
        let data: Vec<f64> = stacks.iter().flatten().cloned().collect();
        Tensor::new(&[stacks.len(), 1, g, k, k], data).unwrap()
    }

    fn random_bank(c_out: usize, c_in: usize, g: usize, k: usize, seed: u64) -> Tensor<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        Tensor::from_fn(&[c_out, c_in, g, k, k], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identical_copies_score_one() {
        let kern = vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0, -1.0, 2.0, 4.0];
        let stack: Vec<f64> = kern.iter().cycle().take(4 * 9).cloned().collect();
        let bank = bank_from_stacks(&[stack], 4, 3);
        let r = pc1_ratio(&bank, false).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12, "{}", r[0]);
    }

    #[test]
    fn sign_flipped_copies_score_one() {
        let kern = [1.0, -2.0, 0.5, 3.0];
        let mut stack = Vec::new();
        for (i, sign) in [1.0, -1.0, 1.0, -1.0].iter().enumerate() {
            let _ = i;
            stack.extend(kern.iter().map(|v| v * sign));
        }
        let bank = bank_from_stacks(&[stack], 4, 2);
        let r = pc1_ratio(&bank, false).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_equal_norm_kernels_score_one_over_g() {
        // four one-hot kernels: equal singular values
        let mut stack = vec![0.0; 4 * 4];
        for g in 0..4 {
            stack[g * 4 + g] = 2.0;
        }
        let bank = bank_from_stacks(&[stack], 4, 2);
        let r = pc1_ratio(&bank, false).unwrap();
        assert!((r[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_stack_scores_one_and_counts_as_degenerate() {
        let bank = Tensor::<f64>::zeros(&[2, 1, 4, 3, 3]);
        let r = pc1_ratio(&bank, false).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);
        let rep = RedundancyReport::measure("l0", &bank, false, 10).unwrap();
        assert_eq!(rep.degenerate_sets, 2);
    }

    #[test]
    fn rejects_small_groups_and_bad_shapes() {
        assert!(pc1_ratio(&Tensor::<f64>::zeros(&[2, 2, 1, 3, 3]), false).is_err());
        assert!(pc1_ratio(&Tensor::<f64>::zeros(&[2, 2, 4, 3]), false).is_err());
        assert!(rank1_project(&Tensor::<f64>::zeros(&[2, 2, 3, 2])).is_err());
    }

    #[test]
    fn ratios_stay_in_range_on_random_banks() {
        for seed in 0..20 {
            for (g, k) in [(4, 3), (8, 3), (4, 5), (8, 1)] {
                let bank = random_bank(3, 2, g, k, seed * 31 + g as u64);
                for r in pc1_ratio(&bank, false).unwrap() {
                    let lo = 1.0 / g as f64;
                    assert!(r >= lo - 1e-9 && r <= 1.0 + 1e-9, "ratio {} out of [{}, 1]", r, lo);
                }
            }
        }
    }

    #[test]
    fn ratio_is_scale_and_common_permutation_invariant() {
        let bank = random_bank(2, 2, 4, 3, 7);
        let base = pc1_ratio(&bank, false).unwrap();

        let scaled = bank.map(|v| v * -3.25);
        let rs = pc1_ratio(&scaled, false).unwrap();

        // one fixed spatial shuffle applied to every kernel of every stack
        let perm = [4usize, 0, 8, 2, 6, 1, 7, 3, 5];
        let shuffled = Tensor::from_fn(&[2, 2, 4, 3, 3], |i| {
            let p = perm[i[3] * 3 + i[4]];
            bank.at(&[i[0], i[1], i[2], p / 3, p % 3])
        });
        let rp = pc1_ratio(&shuffled, false).unwrap();

        for i in 0..base.len() {
            assert!((base[i] - rs[i]).abs() < 1e-12);
            assert!((base[i] - rp[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rank1_input_reconstructs_exactly() {
        let mut rng = StdRng::seed_from_u64(3);
        let kern: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = [0.7, -1.3, 0.2, 2.0];
        let stack: Vec<f64> = w.iter().flat_map(|wi| kern.iter().map(move |v| wi * v)).collect();
        let bank = bank_from_stacks(&[stack], 4, 3);
        let (kout, wout, residual) = rank1_project(&bank).unwrap();
        assert!(residual < 1e-12, "residual {}", residual);
        for g in 0..4 {
            for i in 0..3 {
                for j in 0..3 {
                    let rebuilt = wout.at(&[0, 0, g]) * kout.at(&[0, 0, i, j]);
                    assert!((rebuilt - bank.at(&[0, 0, g, i, j])).abs() < 1e-12);
                }
            }
        }
        // unit-norm kernel with the scale carried by w
        let knorm: f64 = kout.data().iter().map(|v| v * v).sum();
        assert!((knorm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_bank_projects_to_zero_with_zero_residual() {
        let bank = Tensor::<f64>::zeros(&[1, 2, 4, 3, 3]);
        let (k, w, residual) = rank1_project(&bank).unwrap();
        assert!(k.data().iter().all(|&v| v == 0.0));
        assert!(w.data().iter().all(|&v| v == 0.0));
        assert_eq!(residual, 0.0);
    }

    #[test]
    fn residual_squared_complements_the_pc1_ratio() {
        // single-stack banks: relative error^2 + explained fraction = 1
        for seed in 0..50 {
            let bank = random_bank(1, 1, 8, 3, 1000 + seed);
            let ratio = pc1_ratio(&bank, false).unwrap()[0];
            let (_, _, residual) = rank1_project(&bank).unwrap();
            assert!(
                (residual * residual - (1.0 - ratio)).abs() < 1e-9,
                "residual^2 {} vs 1-ratio {}",
                residual * residual,
                1.0 - ratio
            );
        }
    }

    #[test]
    fn rank1_beats_any_single_member_as_shared_kernel() {
        // least-squares optimality spot check: the SVD factorization has
        // no larger error than reusing stack member 0 with its own
        // best per-group scales
        let bank = random_bank(1, 1, 4, 3, 99);
        let (_, _, residual) = rank1_project(&bank).unwrap();
        let k0: Vec<f64> = (0..9).map(|i| bank.at(&[0, 0, 0, i / 3, i % 3])).collect();
        let k0n: f64 = k0.iter().map(|v| v * v).sum();
        let mut err2 = 0.0;
        let mut tot2 = 0.0;
        for g in 0..4 {
            let row: Vec<f64> = (0..9).map(|i| bank.at(&[0, 0, g, i / 3, i % 3])).collect();
            let dot: f64 = row.iter().zip(&k0).map(|(a, b)| a * b).sum();
            let scale = dot / k0n;
            for i in 0..9 {
                let d = row[i] - scale * k0[i];
                err2 += d * d;
                tot2 += row[i] * row[i];
            }
        }
        let naive = (err2 / tot2).sqrt();
        assert!(residual <= naive + 1e-12, "{} > {}", residual, naive);
    }

    #[test]
    fn centered_and_uncentered_disagree_on_mean_shifted_stacks() {
        // constant offset shared by all members: uncentered sees a strong
        // common component, centered removes it entirely
        let mut stack = Vec::new();
        for g in 0..4 {
            for i in 0..4 {
                stack.push(10.0 + if i == g { 1.0 } else { 0.0 });
            }
        }
        let bank = bank_from_stacks(&[stack], 4, 2);
        let raw = pc1_ratio(&bank, false).unwrap()[0];
        let centered = pc1_ratio(&bank, true).unwrap()[0];
        assert!(raw > 0.99, "raw {}", raw);
        assert!(centered < 0.5, "centered {}", centered);
        // identical copies have zero centered variance: degenerate case
        let kern = vec![1.0, 2.0, 3.0, 4.0];
        let same: Vec<f64> = kern.iter().cycle().take(16).cloned().collect();
        let same_bank = bank_from_stacks(&[same], 4, 2);
        assert_eq!(pc1_ratio(&same_bank, true).unwrap()[0], 1.0);
    }

    #[test]
    fn histogram_bins_cover_unit_interval() {
        let h = layer_histogram(&[1.0, 1.0, 0.999, 0.0, 0.04, 0.5], 20);
        assert_eq!(h.counts.iter().sum::<usize>(), 6);
        assert_eq!(h.counts[19], 3); // 1.0 x2 and 0.999
        assert_eq!(h.counts[0], 2); // 0.0 and 0.04
        assert_eq!(h.counts[10], 1); // 0.5
        assert_eq!(h.edges.len(), 21);
    }

    #[test]
    fn report_summarizes_ratios_and_emits_csv() {
        let bank = random_bank(2, 3, 4, 3, 5);
        let rep = RedundancyReport::measure("conv2", &bank, false, 20).unwrap();
        assert_eq!(rep.ratios.len(), 6);
        let want_mean = rep.ratios.iter().sum::<f64>() / 6.0;
        assert!((rep.mean_ratio - want_mean).abs() < 1e-15);
        assert_eq!(rep.degenerate_sets, 0);

        let csv = rep.ratios_csv(3);
        assert!(csv.starts_with("layer,n,c,ratio\n"));
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(4).unwrap().starts_with("conv2,1,0,"));

        let hcsv = rep.histogram_csv();
        assert!(hcsv.starts_with("bin_lo,bin_hi,count\n"));
        assert_eq!(hcsv.lines().count(), 21);
    }
}
