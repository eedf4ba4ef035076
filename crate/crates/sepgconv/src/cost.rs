//! Analytic parameter and multiply-accumulate counts for convolution
//! layers (plain, lifting / full group convolutions, their separable
//! factorizations) and whole networks.
//!
//! Counts are exact integers in u128 and cover convolution weights and
//! MACs only; biases are tallied separately, and batchnorm / pooling /
//! activation cost nothing here. Spatial sizes refer to *output*
//! positions, so 'same'-padded layers pass their input size and 'valid'
//! layers the shrunken size. Reduction factors versus the full group
//! convolution are kept as exact rationals and must equal the integer
//! count quotients — a property the tests pin down.

use num::rational::Ratio;

use crate::error::{Error, Result};

/// What kind of convolution a layer performs, for counting purposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Plain convolution, no group structure.
    Regular,
    /// First equivariant layer: image in, group feature map out.
    LiftingGconv,
    /// Group feature map in and out, full filter bank.
    FullGconv,
    /// Shared spatial kernel per (out, in) pair + group-mixing weights.
    GSep,
    /// One spatial kernel per output channel + full mixing weights.
    GcSep,
    /// Per-channel spatial kernel + 1x1 mixing (plain separable).
    DepthwiseSep,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Regular => "regular",
            LayerKind::LiftingGconv => "lifting-gconv",
            LayerKind::FullGconv => "full-gconv",
            LayerKind::GSep => "g-sep",
            LayerKind::GcSep => "gc-sep",
            LayerKind::DepthwiseSep => "depthwise-sep",
        }
    }

    pub fn is_equivariant(self) -> bool {
        !matches!(self, LayerKind::Regular | LayerKind::DepthwiseSep)
    }
}

/// Dimensions of one convolution layer. `h` and `w` are the output
/// spatial extent (equal to the input extent under 'same' padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub g_in: usize,
    pub g_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl LayerShape {
    pub fn new(
        kind: LayerKind,
        c_in: usize,
        c_out: usize,
        g_in: usize,
        g_out: usize,
        k: usize,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        let shape = LayerShape { kind, c_in, c_out, g_in, g_out, k, h, w };
        shape.validate()?;
        Ok(shape)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("g_in", self.g_in),
            ("g_out", self.g_out),
            ("k", self.k),
            ("h", self.h),
            ("w", self.w),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{} must be positive", name)));
            }
        }
        match self.kind {
            LayerKind::Regular | LayerKind::DepthwiseSep => {
                if self.g_in != 1 || self.g_out != 1 {
                    return Err(Error::invalid(format!(
                        "{} layers carry no group axis; got g_in={}, g_out={}",
                        self.kind.name(),
                        self.g_in,
                        self.g_out
                    )));
                }
            }
            LayerKind::LiftingGconv => {
                if self.g_in != 1 {
                    return Err(Error::invalid(format!(
                        "lifting layers take flat images; got g_in={}",
                        self.g_in
                    )));
                }
            }
            LayerKind::FullGconv => {
                if self.g_in != 1 && self.g_in != self.g_out {
                    return Err(Error::invalid(format!(
                        "full gconv wants g_in in {{1, {}}}, got {}",
                        self.g_out, self.g_in
                    )));
                }
            }
            LayerKind::GSep | LayerKind::GcSep => {
                if self.g_in != self.g_out {
                    return Err(Error::invalid(format!(
                        "separable gconv mixes within one group; got g_in={}, g_out={}",
                        self.g_in, self.g_out
                    )));
                }
            }
        }
        Ok(())
    }

    /// The full group convolution these dimensions would need — what a
    /// separable kind's reduction factor is quoted against.
    pub fn as_full(&self) -> LayerShape {
        LayerShape { kind: LayerKind::FullGconv, ..*self }
    }

    fn u(&self) -> (u128, u128, u128, u128, u128, u128, u128) {
        (
            self.c_in as u128,
            self.c_out as u128,
            self.g_in as u128,
            self.g_out as u128,
            (self.k * self.k) as u128,
            self.h as u128,
            self.w as u128,
        )
    }
}

/// Convolution weight count (biases excluded, see [`count_bias`]).
pub fn count_params(shape: &LayerShape) -> u128 {
    let (ci, co, gi, _go, kk, _, _) = shape.u();
    match shape.kind {
        LayerKind::Regular => ci * kk * co,
        LayerKind::LiftingGconv | LayerKind::FullGconv => ci * gi * kk * co,
        LayerKind::GSep => ci * co * (gi + kk),
        LayerKind::GcSep => co * (ci * gi + kk),
        LayerKind::DepthwiseSep => ci * kk + ci * co,
    }
}

/// Bias parameter count. Equivariant layers share one bias per output
/// channel across the group axis; the depthwise-separable layer carries
/// one per stage.
pub fn count_bias(shape: &LayerShape) -> u128 {
    let (ci, co, ..) = shape.u();
    match shape.kind {
        LayerKind::DepthwiseSep => ci + co,
        _ => co,
    }
}

/// Convolution multiply-accumulates over the whole output extent.
pub fn count_macs(shape: &LayerShape) -> u128 {
    let (ci, co, gi, go, kk, h, w) = shape.u();
    match shape.kind {
        LayerKind::Regular => ci * kk * h * w * co,
        LayerKind::LiftingGconv | LayerKind::FullGconv => ci * gi * kk * h * w * co * go,
        LayerKind::GSep => ci * co * go * h * w * (gi + kk),
        LayerKind::GcSep => co * go * h * w * (ci * gi + kk),
        LayerKind::DepthwiseSep => ci * h * w * (kk + co),
    }
}

/// Cost ratio of this layer against a full group convolution of the
/// same dimensions. Separable kinds give 1/k^2 + 1/G (g-sep) or
/// 1/k^2 + 1/(C_in*G) (gc-sep); non-separable kinds give 1. The ratio
/// also equals the exact quotient of the integer counts.
pub fn reduction_factor(shape: &LayerShape) -> Ratio<u128> {
    let (ci, _co, gi, _go, kk, _, _) = shape.u();
    match shape.kind {
        LayerKind::GSep => Ratio::new(1, kk) + Ratio::new(1, gi),
        LayerKind::GcSep => Ratio::new(1, kk) + Ratio::new(1, ci * gi),
        LayerKind::DepthwiseSep => Ratio::new(1, kk) + Ratio::new(1, ci),
        LayerKind::Regular | LayerKind::LiftingGconv | LayerKind::FullGconv => Ratio::new(1, 1),
    }
}

/// Per-layer cost summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub params: u128,
    pub bias_params: u128,
    pub macs: u128,
    pub reduction_vs_full: Ratio<u128>,
    /// False when the decomposition costs at least as much as the full
    /// layer (possible at degenerate sizes like k = 1).
    pub beneficial: bool,
}

pub fn layer_report(shape: &LayerShape) -> Result<CostReport> {
    shape.validate()?;
    let reduction = reduction_factor(shape);
    Ok(CostReport {
        params: count_params(shape),
        bias_params: count_bias(shape),
        macs: count_macs(shape),
        beneficial: reduction < Ratio::new(1, 1) || !shape.kind.is_equivariant(),
        reduction_vs_full: reduction,
    })
}

/// One convolution block in a network description: the convolution
/// itself plus whether it carries a bias and a following batchnorm.
#[derive(Clone, Debug)]
pub struct LayerPlan {
    pub name: String,
    pub shape: LayerShape,
    pub bias: bool,
    pub batchnorm: bool,
}

/// A whole network for counting purposes: convolution blocks plus a
/// final linear classifier (in_features, out_classes) with bias.
#[derive(Clone, Debug)]
pub struct NetworkPlan {
    pub name: String,
    pub layers: Vec<LayerPlan>,
    pub head: (usize, usize),
}

/// Totals for a [`NetworkPlan`]. `total_params` is everything trainable
/// (conv weights, biases, batchnorm scale/shift, classifier);
/// `total_macs` counts convolution MACs only.
#[derive(Clone, Debug)]
pub struct NetworkCostReport {
    pub name: String,
    pub per_layer: Vec<(String, CostReport)>,
    pub conv_params: u128,
    pub bias_params: u128,
    pub bn_params: u128,
    pub head_params: u128,
    pub total_params: u128,
    pub total_macs: u128,
}

pub fn network_report(plan: &NetworkPlan) -> Result<NetworkCostReport> {
    let mut per_layer = Vec::with_capacity(plan.layers.len());
    let (mut conv, mut bias, mut bn, mut macs) = (0u128, 0u128, 0u128, 0u128);
    for layer in &plan.layers {
        let rep = layer_report(&layer.shape)?;
        conv += rep.params;
        if layer.bias {
            bias += rep.bias_params;
        }
        if layer.batchnorm {
            bn += 2 * layer.shape.c_out as u128;
        }
        macs += rep.macs;
        per_layer.push((layer.name.clone(), rep));
    }
    let head_params = (plan.head.0 as u128 + 1) * plan.head.1 as u128;
    Ok(NetworkCostReport {
        name: plan.name.clone(),
        per_layer,
        conv_params: conv,
        bias_params: bias,
        bn_params: bn,
        head_params,
        total_params: conv + bias + bn + head_params,
        total_macs: macs,
    })
}

impl NetworkCostReport {
    /// `layer,kind,params,macs,reduction` rows plus a totals row.
    pub fn to_csv(&self, plan: &NetworkPlan) -> String {
        let mut out = String::from("layer,kind,params,macs,reduction\n");
        for ((name, rep), layer) in self.per_layer.iter().zip(&plan.layers) {
            out.push_str(&format!(
                "{},{},{},{},{}/{}\n",
                name,
                layer.shape.kind.name(),
                rep.params,
                rep.macs,
                rep.reduction_vs_full.numer(),
                rep.reduction_vs_full.denom()
            ));
        }
        out.push_str(&format!("total,,{},{},\n", self.total_params, self.total_macs));
        out
    }

    /// Human-readable aligned table.
    pub fn to_table(&self, plan: &NetworkPlan) -> String {
        let mut out = format!("{}\n", self.name);
        out.push_str(&format!(
            "{:<10} {:<14} {:>10} {:>14} {:>10}\n",
            "layer", "kind", "params", "macs", "reduction"
        ));
        for ((name, rep), layer) in self.per_layer.iter().zip(&plan.layers) {
            let red = if rep.reduction_vs_full == Ratio::new(1, 1) {
                String::from("-")
            } else {
                format!("{:.4}", *rep.reduction_vs_full.numer() as f64 / *rep.reduction_vs_full.denom() as f64)
            };
            out.push_str(&format!(
                "{:<10} {:<14} {:>10} {:>14} {:>10}\n",
                name,
                layer.shape.kind.name(),
                rep.params,
                rep.macs,
                red
            ));
        }
        out.push_str(&format!(
            "conv {} + bias {} + bn {} + head {} = {} trainable params; {} conv MACs\n",
            self.conv_params, self.bias_params, self.bn_params, self.head_params, self.total_params, self.total_macs
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(kind: LayerKind, c_in: usize, c_out: usize, g: usize, k: usize, hw: usize) -> LayerShape {
        let (g_in, g_out) = match kind {
            LayerKind::Regular | LayerKind::DepthwiseSep => (1, 1),
            LayerKind::LiftingGconv => (1, g),
            _ => (g, g),
        };
        LayerShape::new(kind, c_in, c_out, g_in, g_out, k, hw, hw).unwrap()
    }

    #[test]
    fn full_gconv_counts_match_hand_arithmetic() {
        let s = shape(LayerKind::FullGconv, 10, 10, 4, 3, 28);
        assert_eq!(count_params(&s), 3600);
        assert_eq!(count_macs(&s), 11_289_600);
    }

    #[test]
    fn g_separable_counts_match_hand_arithmetic() {
        let s = shape(LayerKind::GSep, 10, 10, 4, 3, 28);
        assert_eq!(count_params(&s), 1300);
        assert_eq!(count_macs(&s), 4_076_800);
    }

    #[test]
    fn gc_separable_counts_match_hand_arithmetic() {
        let s = shape(LayerKind::GcSep, 10, 10, 4, 3, 28);
        assert_eq!(count_params(&s), 490);
        assert_eq!(count_macs(&s), 1_536_640);
    }

    #[test]
    fn reduction_factors_equal_the_count_quotients() {
        let g = shape(LayerKind::GSep, 10, 10, 4, 3, 28);
        assert_eq!(reduction_factor(&g), Ratio::new(13, 36));
        assert_eq!(
            Ratio::new(count_params(&g), count_params(&g.as_full())),
            reduction_factor(&g)
        );
        assert_eq!(Ratio::new(count_macs(&g), count_macs(&g.as_full())), reduction_factor(&g));

        let gc = shape(LayerKind::GcSep, 10, 10, 4, 3, 28);
        assert_eq!(reduction_factor(&gc), Ratio::new(49, 360));
        assert_eq!(
            Ratio::new(count_params(&gc), count_params(&gc.as_full())),
            reduction_factor(&gc)
        );
        assert_eq!(Ratio::new(count_macs(&gc), count_macs(&gc.as_full())), reduction_factor(&gc));
    }

    #[test]
    fn degenerate_sizes_make_the_decomposition_a_loss() {
        let s = shape(LayerKind::GcSep, 1, 1, 1, 1, 5);
        assert_eq!(reduction_factor(&s), Ratio::new(2, 1));
        let rep = layer_report(&s).unwrap();
        assert!(!rep.beneficial);

        let ok = shape(LayerKind::GcSep, 10, 10, 4, 3, 5);
        assert!(layer_report(&ok).unwrap().beneficial);
    }

    #[test]
    fn counts_grow_with_each_dimension() {
        for kind in [
            LayerKind::Regular,
            LayerKind::LiftingGconv,
            LayerKind::FullGconv,
            LayerKind::GSep,
            LayerKind::GcSep,
            LayerKind::DepthwiseSep,
        ] {
            let base = shape(kind, 4, 6, 4, 3, 9);
            for grown in [
                shape(kind, 5, 6, 4, 3, 9),
                shape(kind, 4, 7, 4, 3, 9),
                shape(kind, 4, 6, 4, 5, 9),
            ] {
                assert!(count_params(&grown) > count_params(&base), "{:?}", kind);
                assert!(count_macs(&grown) > count_macs(&base), "{:?}", kind);
            }
        }
    }

    #[test]
    fn shapes_reject_inconsistent_group_depths() {
        assert!(LayerShape::new(LayerKind::Regular, 3, 4, 4, 4, 3, 9, 9).is_err());
        assert!(LayerShape::new(LayerKind::LiftingGconv, 3, 4, 4, 4, 3, 9, 9).is_err());
        assert!(LayerShape::new(LayerKind::FullGconv, 3, 4, 2, 4, 3, 9, 9).is_err());
        assert!(LayerShape::new(LayerKind::GSep, 3, 4, 1, 4, 3, 9, 9).is_err());
        assert!(LayerShape::new(LayerKind::GcSep, 3, 4, 8, 4, 3, 9, 9).is_err());
        assert!(LayerShape::new(LayerKind::FullGconv, 0, 4, 4, 4, 3, 9, 9).is_err());
        // lifting with any order and full with matching depths are fine
        assert!(LayerShape::new(LayerKind::LiftingGconv, 3, 4, 1, 8, 3, 9, 9).is_ok());
        assert!(LayerShape::new(LayerKind::FullGconv, 3, 4, 8, 8, 3, 9, 9).is_ok());
    }

    #[test]
    fn network_report_totals_every_parameter_source() {
        // two blocks + head, all counts checkable by hand
        let plan = NetworkPlan {
            name: "tiny".into(),
            layers: vec![
                LayerPlan {
                    name: "conv1".into(),
                    shape: shape(LayerKind::LiftingGconv, 1, 3, 4, 3, 6),
                    bias: true,
                    batchnorm: true,
                },
                LayerPlan {
                    name: "conv2".into(),
                    shape: shape(LayerKind::FullGconv, 3, 5, 4, 3, 4),
                    bias: true,
                    batchnorm: true,
                },
            ],
            head: (5, 10),
        };
        let rep = network_report(&plan).unwrap();
        assert_eq!(rep.conv_params, 27 + 540);
        assert_eq!(rep.bias_params, 3 + 5);
        assert_eq!(rep.bn_params, 6 + 10);
        assert_eq!(rep.head_params, 60);
        assert_eq!(rep.total_params, 27 + 540 + 8 + 16 + 60);
        assert_eq!(rep.total_macs, 27 * 36 * 4 + 540 * 16 * 4);

        let csv = rep.to_csv(&plan);
        assert!(csv.starts_with("layer,kind,params,macs,reduction\n"));
        assert!(csv.contains("conv1,lifting-gconv,27,"));
        assert!(csv.lines().last().unwrap().starts_with("total,,"));
        let table = rep.to_table(&plan);
        assert!(table.contains("conv2"));
        assert!(table.contains("trainable params"));
    }
}
