//! Randomized invariants. Each block states a law the library claims
//! unconditionally; proptest hunts for counterexamples and shrinks any
//! it finds.

mod common;

use std::path::Path;

use common::{rand_tensor, seeded};
use num::rational::Ratio;
use proptest::prelude::*;
use rand::Rng;

use sepgconv::analysis::pc1_ratio;
use sepgconv::cost::{count_macs, layer_report, reduction_factor, LayerKind, LayerShape};
use sepgconv::data::{batches, load_idx, write_idx, LabeledImageSet};
use sepgconv::group::{
    act_on_kernel, permute_group_axis, transform_spatial, GroupElement, GroupKind, GroupSpec,
};
use sepgconv::io::{decode_tensor, encode_tensor};
use sepgconv::layers::{
    gconv_forward, lift_forward, sep_g_forward_efficient, sep_g_forward_naive,
    sep_gc_forward_efficient, sep_gc_forward_naive, GConvLayer, SepGConvLayerG, SepGConvLayerGC,
};
use sepgconv::ops::Padding;
use sepgconv::Tensor;

fn group_kind() -> impl Strategy<Value = GroupKind> {
    prop_oneof![Just(GroupKind::C4), Just(GroupKind::D4)]
}

/// Group element from an unbounded raw index, reduced mod the order.
fn el(spec: &GroupSpec, raw: usize) -> GroupElement {
    spec.element(raw % spec.order()).unwrap()
}

proptest! {
    #[test]
    fn composition_stays_inside_the_group(kind in group_kind(), a in 0usize..8, b in 0usize..8) {
        let spec = GroupSpec::new(kind);
        let c = spec.compose(el(&spec, a), el(&spec, b)).unwrap();
        prop_assert!(c.index() < spec.order());
    }

    #[test]
    fn identity_and_inverses_behave(kind in group_kind(), a in 0usize..8) {
        let spec = GroupSpec::new(kind);
        let e = spec.identity();
        let a = el(&spec, a);
        let inv = spec.inverse(a).unwrap();
        prop_assert_eq!(spec.compose(e, a).unwrap(), a);
        prop_assert_eq!(spec.compose(a, e).unwrap(), a);
        prop_assert_eq!(spec.compose(a, inv).unwrap(), e);
        prop_assert_eq!(spec.compose(inv, a).unwrap(), e);
        prop_assert_eq!(spec.inverse(inv).unwrap(), a);
    }

    #[test]
    fn composition_is_associative(
        kind in group_kind(),
        a in 0usize..8,
        b in 0usize..8,
        c in 0usize..8,
    ) {
        let spec = GroupSpec::new(kind);
        let (a, b, c) = (el(&spec, a), el(&spec, b), el(&spec, c));
        let ab_c = spec.compose(spec.compose(a, b).unwrap(), c).unwrap();
        let a_bc = spec.compose(a, spec.compose(b, c).unwrap()).unwrap();
        prop_assert_eq!(ab_c, a_bc);
    }

    #[test]
    fn kernel_action_is_a_left_action(
        kind in group_kind(),
        a in 0usize..8,
        b in 0usize..8,
        k in prop_oneof![Just(1usize), Just(3), Just(5)],
        seed in any::<u64>(),
    ) {
        let spec = GroupSpec::new(kind);
        let kernel = rand_tensor(&[k, k], &mut seeded(seed));
        let (a, b) = (el(&spec, a), el(&spec, b));
        // acting is pure index shuffling, so the law holds exactly
        let two_steps = act_on_kernel(&spec, a, &act_on_kernel(&spec, b, &kernel).unwrap()).unwrap();
        let one_step = act_on_kernel(&spec, spec.compose(a, b).unwrap(), &kernel).unwrap();
        prop_assert_eq!(two_steps.data(), one_step.data());
        // and the identity acts trivially
        let fixed = act_on_kernel(&spec, spec.identity(), &kernel).unwrap();
        prop_assert_eq!(fixed.data(), kernel.data());
    }

    #[test]
    fn group_axis_permutations_compose(
        kind in group_kind(),
        a in 0usize..8,
        b in 0usize..8,
        seed in any::<u64>(),
    ) {
        let spec = GroupSpec::new(kind);
        let x = rand_tensor(&[2, spec.order(), 3, 3], &mut seeded(seed));
        let (a, b) = (el(&spec, a), el(&spec, b));
        let two = permute_group_axis(&spec, a, &permute_group_axis(&spec, b, &x, 1).unwrap(), 1).unwrap();
        let one = permute_group_axis(&spec, spec.compose(a, b).unwrap(), &x, 1).unwrap();
        prop_assert_eq!(two.data(), one.data());
    }

    #[test]
    fn spatial_transforms_compose(
        kind in group_kind(),
        a in 0usize..8,
        b in 0usize..8,
        seed in any::<u64>(),
    ) {
        let spec = GroupSpec::new(kind);
        let x = rand_tensor(&[2, 5, 5], &mut seeded(seed));
        let (a, b) = (el(&spec, a), el(&spec, b));
        let two = transform_spatial(&spec, a, &transform_spatial(&spec, b, &x).unwrap()).unwrap();
        let one = transform_spatial(&spec, spec.compose(a, b).unwrap(), &x).unwrap();
        prop_assert_eq!(two.data(), one.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// lift(T_g x) == T'_g lift(x) and likewise for every inner layer
    /// type, at random tiny shapes.
    #[test]
    fn random_layers_are_equivariant(
        kind in group_kind(),
        c_in in 1usize..=3,
        c_out in 1usize..=3,
        k in prop_oneof![Just(1usize), Just(3)],
        seed in any::<u64>(),
    ) {
        let spec = GroupSpec::new(kind);
        let order = spec.order();
        let side = 6;
        let mut rng = seeded(seed);

        let lift = GConvLayer::<f64>::new_random(
            spec.clone(), c_out, c_in, 1, k, true, Padding::Same, &mut rng).unwrap();
        let full = GConvLayer::<f64>::new_random(
            spec.clone(), c_out, c_in, order, k, true, Padding::Same, &mut rng).unwrap();
        let gsep = SepGConvLayerG::<f64>::new_random(
            spec.clone(), c_out, c_in, k, true, Padding::Same, &mut rng).unwrap();
        let gcsep = SepGConvLayerGC::<f64>::new_random(
            spec.clone(), c_out, c_in, k, true, Padding::Same, &mut rng).unwrap();

        let img = rand_tensor(&[c_in, side, side], &mut rng);
        let vol = rand_tensor(&[c_in, order, side, side], &mut rng);

        for g in spec.elements() {
            // lifting: plain image in, group-indexed volume out
            let lhs = lift_forward(&lift, &transform_spatial(&spec, g, &img).unwrap()).unwrap();
            let y = lift_forward(&lift, &img).unwrap();
            let rhs = permute_group_axis(&spec, g, &transform_spatial(&spec, g, &y).unwrap(), 1).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10, "lift deviates under {:?}", g);

            // inner layers: volume in, volume out
            let tvol = permute_group_axis(&spec, g, &transform_spatial(&spec, g, &vol).unwrap(), 1).unwrap();
            for (name, fwd) in [
                ("full", gconv_forward(&full, &vol)),
                ("g-sep", sep_g_forward_efficient(&gsep, &vol)),
                ("gc-sep", sep_gc_forward_efficient(&gcsep, &vol)),
            ] {
                let y = fwd.unwrap();
                let lhs = match name {
                    "full" => gconv_forward(&full, &tvol),
                    "g-sep" => sep_g_forward_efficient(&gsep, &tvol),
                    _ => sep_gc_forward_efficient(&gcsep, &tvol),
                }
                .unwrap();
                let rhs = permute_group_axis(&spec, g, &transform_spatial(&spec, g, &y).unwrap(), 1).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10, "{} deviates under {:?}", name, g);
            }
        }
    }

    #[test]
    fn the_two_separable_paths_agree(
        kind in group_kind(),
        c_in in 1usize..=4,
        c_out in 1usize..=4,
        k in prop_oneof![Just(1usize), Just(3)],
        side in 4usize..=7,
        padding in prop_oneof![Just(Padding::Same), Just(Padding::Valid)],
        seed in any::<u64>(),
    ) {
        let spec = GroupSpec::new(kind);
        let order = spec.order();
        let mut rng = seeded(seed);
        let x = rand_tensor(&[c_in, order, side, side], &mut rng);

        let g = SepGConvLayerG::<f64>::new_random(
            spec.clone(), c_out, c_in, k, true, padding, &mut rng).unwrap();
        let lhs = sep_g_forward_naive(&g, &x).unwrap();
        let rhs = sep_g_forward_efficient(&g, &x).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);

        let gc = SepGConvLayerGC::<f64>::new_random(
            spec.clone(), c_out, c_in, k, true, padding, &mut rng).unwrap();
        let lhs = sep_gc_forward_naive(&gc, &x).unwrap();
        let rhs = sep_gc_forward_efficient(&gc, &x).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pc1_ratio_is_bounded_and_scale_invariant(
        order in prop_oneof![Just(4usize), Just(8)],
        scale in prop_oneof![Just(-3.0f64), Just(-0.125), Just(0.5), Just(20.0)],
        shift in 1usize..8,
        seed in any::<u64>(),
    ) {
        let bank = rand_tensor(&[2, 1, order, 3, 3], &mut seeded(seed));
        let ratios = pc1_ratio(&bank, false).unwrap();
        for &r in &ratios {
            prop_assert!(r >= 1.0 / order as f64 - 1e-12 && r <= 1.0 + 1e-12);
        }

        // global rescaling moves every singular value by the same factor
        let scaled = Tensor::from_fn(bank.shape(), |i| scale * bank.at(i));
        for (a, b) in pc1_ratio(&scaled, false).unwrap().iter().zip(&ratios) {
            prop_assert!((a - b).abs() < 1e-9, "scaling changed a ratio: {} vs {}", a, b);
        }

        // cyclically relabeling the group members permutes the rows of
        // each stack, which cannot change its spectrum
        let rolled = Tensor::from_fn(bank.shape(), |i| {
            bank.at(&[i[0], i[1], (i[2] + shift) % order, i[3], i[4]])
        });
        for (a, b) in pc1_ratio(&rolled, false).unwrap().iter().zip(&ratios) {
            prop_assert!((a - b).abs() < 1e-9, "relabeling changed a ratio: {} vs {}", a, b);
        }
    }

    /// The advertised reduction factor is literally macs(separable) /
    /// macs(full) at identical dimensions, and `beneficial` is exactly
    /// "that quotient is below one".
    #[test]
    fn reduction_factors_are_exact_mac_quotients(
        separable in prop_oneof![Just(LayerKind::GSep), Just(LayerKind::GcSep)],
        c_in in 1usize..=16,
        c_out in 1usize..=16,
        order in prop_oneof![Just(4usize), Just(8)],
        k in 1usize..=7,
        h in 1usize..=16,
        w in 1usize..=16,
    ) {
        let sep = LayerShape::new(separable, c_in, c_out, order, order, k, h, w).unwrap();
        let full = LayerShape::new(LayerKind::FullGconv, c_in, c_out, order, order, k, h, w).unwrap();
        let quotient = Ratio::new(count_macs(&sep), count_macs(&full));
        prop_assert_eq!(reduction_factor(&sep), quotient);
        prop_assert_eq!(
            layer_report(&sep).unwrap().beneficial,
            count_macs(&sep) < count_macs(&full)
        );

        // the depthwise analogue, quoted against a plain convolution
        // (the published 1/k^2 + 1/C form assumes C_in == C_out)
        let dw = LayerShape::new(LayerKind::DepthwiseSep, c_in, c_in, 1, 1, k, h, w).unwrap();
        let plain = LayerShape::new(LayerKind::Regular, c_in, c_in, 1, 1, k, h, w).unwrap();
        prop_assert_eq!(
            reduction_factor(&dw),
            Ratio::new(count_macs(&dw), count_macs(&plain))
        );
    }

    #[test]
    fn tensor_files_round_trip(
        dims in prop::collection::vec(1usize..=5, 1..=4),
        seed in any::<u64>(),
        double in any::<bool>(),
    ) {
        if double {
            let t = rand_tensor(&dims, &mut seeded(seed));
            let bytes = encode_tensor(&t).unwrap();
            let back = decode_tensor::<f64>(Path::new("mem"), &bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.data(), t.data());
        } else {
            let mut rng = seeded(seed);
            let t = Tensor::<f32>::from_fn(&dims, |_| rng.gen_range(-1.0f32..1.0));
            let bytes = encode_tensor(&t).unwrap();
            let back = decode_tensor::<f32>(Path::new("mem"), &bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.data(), t.data());
        }
    }
}

/// A set whose i-th image stores `i / 255` in its first pixel (pixels
/// must stay in [0,1]), so batch contents can be traced back to sample
/// indices. Works for up to 256 samples.
fn traceable_set(n: usize) -> LabeledImageSet {
    assert!(n <= 256);
    let images = Tensor::from_fn(&[n, 1, 28, 28], |i| {
        if i[2] == 0 && i[3] == 0 {
            i[0] as f32 / 255.0
        } else {
            0.0
        }
    });
    let labels = (0..n).map(|i| (i % 10) as u8).collect();
    LabeledImageSet::new(images, labels, "traceable").unwrap()
}

fn traced_index(first_pixel: f32) -> usize {
    (first_pixel * 255.0).round() as usize
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_visit_every_sample_exactly_once(
        n in 1usize..=64,
        batch_size in 1usize..=70,
        seed in any::<u64>(),
        shuffle in any::<bool>(),
    ) {
        let set = traceable_set(n);
        let mut seen = Vec::with_capacity(n);
        let mut sizes = Vec::new();
        for (images, labels) in batches(&set, batch_size, seed, shuffle).unwrap() {
            prop_assert_eq!(images.shape()[0], labels.len());
            sizes.push(labels.len());
            for b in 0..labels.len() {
                let idx = traced_index(images.at(&[b, 0, 0, 0]));
                prop_assert_eq!(labels[b], (idx % 10) as u8);
                seen.push(idx);
            }
        }
        seen.sort_unstable();
        let everyone: Vec<usize> = (0..n).collect();
        prop_assert_eq!(seen, everyone);
        // all full batches except possibly the last
        for (i, &s) in sizes.iter().enumerate() {
            if i + 1 < sizes.len() {
                prop_assert_eq!(s, batch_size);
            } else {
                prop_assert!(s <= batch_size && s > 0);
            }
        }
    }

    #[test]
    fn fraction_keeps_the_ceiling(
        n in 1usize..=100,
        num in 1usize..=100,
        seed in any::<u64>(),
    ) {
        let f = num as f64 / 100.0;
        let set = traceable_set(n);
        let sub = set.fraction(f, seed).unwrap();
        let want = ((f * n as f64).ceil() as usize).clamp(1, n);
        prop_assert_eq!(sub.len(), want);
        // a subset, not a resampling: indices are distinct and in range
        let mut idx: Vec<usize> =
            (0..sub.len()).map(|b| traced_index(sub.image(b).at(&[0, 0, 0]))).collect();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), sub.len());
        prop_assert!(idx.iter().all(|&i| i < n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn idx_files_round_trip(n in 1usize..=6, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        // pixels that are exact byte multiples survive the u8 encoding
        let images = Tensor::from_fn(&[n, 1, 28, 28], |_| rng.gen_range(0u8..=255) as f32 / 255.0);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0u8..=9)).collect();
        let set = LabeledImageSet::new(images, labels, "roundtrip").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("images-idx3-ubyte");
        let lpath = dir.path().join("labels-idx1-ubyte");
        write_idx(&set, &ipath, &lpath).unwrap();
        let back = load_idx(&ipath, &lpath).unwrap();

        prop_assert_eq!(back.len(), set.len());
        for i in 0..n {
            let (got, want) = (back.image(i), set.image(i));
            prop_assert_eq!(got.data(), want.data());
        }
    }
}
