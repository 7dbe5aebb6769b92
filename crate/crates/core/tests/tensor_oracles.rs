mod common;

use common::{naive_conv2d, uniform, weighted_sum};
use dehaze::tensor::{
    concat_channels, conv2d_forward, fixture, grad_check, pixel_shuffle_tensor, BatchNormMode, ConvSpec, GradCheck,
    RunningStats, Tape,
};
use dehaze::{Error, Shape, Tensor};
use proptest::prelude::*;

#[test]
fn conv_matches_naive_oracle_on_random_batch() {
    let x = uniform(Shape::new(2, 4, 8, 8), 1);
    for spec in [
        ConvSpec::new(4, 6, 3).padding(1),
        ConvSpec::new(4, 4, 3).groups(4).dilation(3).same(),
        ConvSpec::new(4, 8, 5).stride(2).padding(2),
        ConvSpec::new(4, 6, 1),
        ConvSpec::new(4, 6, 3).groups(2).stride(2),
    ] {
        let w = uniform(spec.weight_shape(), 2);
        let b = uniform(Shape::new(1, spec.out_channels, 1, 1), 3);
        let fast = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
        let slow = naive_conv2d(&x, &w, Some(&b), &spec);
        assert!(fast.max_abs_diff(&slow) < 1e-10, "{spec:?}");
    }
}

#[test]
fn receptive_extent_of_paper_branches() {
    for (k, extent) in [(7, 19), (5, 13), (3, 7)] {
        let spec = ConvSpec::new(8, 8, k).dilation(3).groups(8).same();
        assert_eq!(spec.extent(), (extent, extent));
        let x = uniform(Shape::new(1, 8, 24, 24), 4);
        let w = uniform(spec.weight_shape(), 5);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
}

#[test]
fn conv_gradients_match_central_differences() {
    let spec = ConvSpec::new(2, 3, 3).padding(1);
    let x = uniform(Shape::new(1, 2, 5, 5), 10);
    let w = uniform(spec.weight_shape(), 11);
    let b = uniform(Shape::new(1, 3, 1, 1), 12);
    let report = grad_check(
        |_, v| weighted_sum(&v[0].conv2d(&v[1], Some(&v[2]), &spec)?, 13),
        &[x, w, b],
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn strided_dilated_grouped_conv_gradients() {
    for spec in [
        ConvSpec::new(4, 4, 3).dilation(3).groups(4).same(),
        ConvSpec::new(4, 6, 3).stride(2).padding(1).groups(2),
        ConvSpec::new(4, 2, 1),
    ] {
        let x = uniform(Shape::new(2, 4, 8, 8), 20);
        let w = uniform(spec.weight_shape(), 21);
        let report = grad_check(
            |_, v| weighted_sum(&v[0].conv2d(&v[1], None, &spec)?, 22),
            &[x, w],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{spec:?}: {report:?}");
    }
}

#[test]
fn depthwise_kernel_wider_than_its_input() {
    // most taps of a dilated 7x7 fall outside a 3x3 plane
    for (spec, hw) in [
        (ConvSpec::new(2, 2, 7).dilation(3).groups(2).same(), 3),
        (ConvSpec::new(2, 2, 5).dilation(3).groups(2).stride(3).padding(6), 4),
    ] {
        let x = uniform(Shape::new(1, 2, hw, hw), 23);
        let w = uniform(spec.weight_shape(), 24);
        let got = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert!(got.max_abs_diff(&naive_conv2d(&x, &w, None, &spec)) < 1e-12);
        let report = grad_check(
            |_, v| weighted_sum(&v[0].conv2d(&v[1], None, &spec)?, 25),
            &[x, w],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{spec:?}: {report:?}");
    }
}

#[test]
fn gelu_gradient_at_reference_points() {
    let x = Tensor::new(Shape::new(1, 1, 1, 5), vec![-3.0, -1.0, 0.0, 1.0, 3.0]).unwrap();
    let report = grad_check(|_, v| Ok(v[0].gelu().sum()), &[x], 1e-4, 1e-5).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn sigmoid_chain_gradient() {
    let x = uniform(Shape::new(1, 2, 3, 3), 30);
    let report = grad_check(
        |_, v| weighted_sum(&v[0].sigmoid().scale(2.0).sigmoid(), 31),
        &[x],
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn batch_norm_gradients_train_and_eval() {
    let x = uniform(Shape::new(2, 3, 4, 4), 40).map(|v| 3.0 * v + 0.5);
    let gamma = uniform(Shape::new(1, 3, 1, 1), 41).map(|v| v + 1.5);
    let beta = uniform(Shape::new(1, 3, 1, 1), 42);
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        let report = grad_check(
            |_, v| {
                let mut stats = RunningStats::from_parts(vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]).unwrap();
                let y = v[0].batch_norm(&v[1], &v[2], &mut stats, mode)?;
                weighted_sum(&y, 43)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{mode:?}: {report:?}");
    }
}

#[test]
fn layout_op_gradients() {
    let a = uniform(Shape::new(2, 2, 3, 3), 50);
    let b = uniform(Shape::new(2, 3, 3, 3), 51);
    let gate = uniform(Shape::new(2, 2, 1, 1), 52);
    let pa = uniform(Shape::new(2, 1, 3, 3), 53);
    let report = grad_check(
        |_, v| {
            let cat = concat_channels(&[&v[0], &v[1]])?;
            let gated = v[0].mul(&v[2])?.add(&cat.slice_channels(1, 2)?)?;
            let spatial = v[1].mul(&v[3].broadcast_channels(3)?)?;
            let pooled = spatial.global_avg_pool().group_softmax(3)?;
            let shuffled = concat_channels(&[&gated, &gated])?.pixel_shuffle(2)?;
            Ok(weighted_sum(&shuffled, 54)?.add(&weighted_sum(&pooled, 55)?)?)
        },
        &[a, b, gate, pa],
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn arithmetic_op_gradients() {
    let a = uniform(Shape::new(1, 2, 3, 3), 60);
    let b = uniform(Shape::new(1, 2, 3, 3), 61).map(|v| v + 2.5);
    let report = grad_check(
        |_, v| {
            let q = v[0].div(&v[1])?.sub(&v[1].scale(0.3))?.add_scalar(0.7);
            Ok(weighted_sum(&q, 62)?
                .add(&v[0].abs().mean())?
                .add(&v[1].relu().mean())?)
        },
        &[a, b],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let x = uniform(Shape::new(1, 1, 3, 3), 70);
    let report = grad_check(
        |tape, v| {
            let value = v[0].value().map(|t| t * t);
            // Claims d(x^2)/dx = x instead of 2x.
            let x = v[0].value().clone();
            let sq = tape.record(
                value,
                &[&v[0]],
                Box::new(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| gv * xv).unwrap())]),
            );
            Ok(sq.sum())
        },
        &[x],
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(!report.passed);
    assert!(report.worst() > 1e-2, "{report:?}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let spec = ConvSpec::new(3, 5, 3).padding(1);
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(uniform(Shape::new(2, 3, 6, 6), 80));
        let w = tape.leaf(uniform(spec.weight_shape(), 81));
        let y = x.conv2d(&w, None, &spec).unwrap().gelu();
        let loss = weighted_sum(&concat_channels(&[&y, &y]).unwrap(), 82).unwrap();
        let grads = tape.backward(&loss).unwrap();
        (grads.get(&x).unwrap().clone(), grads.get(&w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn backward_of_non_scalar_is_an_error() {
    let tape = Tape::new();
    let x = tape.leaf(uniform(Shape::new(1, 2, 2, 2), 90));
    assert!(matches!(tape.backward(&x.gelu()), Err(Error::NonScalarLoss(_))));
}

#[test]
fn sampled_grad_check_reports_every_input() {
    let x = uniform(Shape::new(1, 4, 6, 6), 100);
    let report = GradCheck::default()
        .sample(10, 7)
        .run(|_, v| Ok(v[0].sigmoid().sum()), &[x])
        .unwrap();
    assert_eq!(report.max_rel_error.len(), 1);
    assert!(report.passed);
}

#[test]
fn gap_conserves_mass() {
    let x = uniform(Shape::new(2, 3, 5, 7), 110);
    let tape = Tape::no_grad();
    let pooled = tape.constant(x.clone()).global_avg_pool();
    let total: f64 = pooled.value().data().iter().sum::<f64>() * 35.0;
    assert!((total - x.sum()).abs() < 1e-9);
}

fn unshuffle_oracle(t: &Tensor, r: usize) -> Tensor {
    // Inverse permutation written from the index map of the forward op.
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c * r * r, s.h / r, s.w / r)).unwrap();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    out.set(n, c * r * r + (y % r) * r + (x % r), y / r, x / r, t.at(n, c, y, x));
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pixel_shuffle_inverse_is_exact(n in 1usize..3, c in 1usize..4, r in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
        let t = uniform(Shape::new(n, c * r * r, h, w), seed);
        let shuffled = pixel_shuffle_tensor(&t, r).unwrap();
        prop_assert_eq!(shuffled.shape(), Shape::new(n, c, h * r, w * r));
        let back = unshuffle_oracle(&shuffled, r);
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn conv_matches_oracle_over_specs(
        stride in 1usize..3,
        dilation in prop::sample::select(vec![1usize, 3]),
        depthwise in any::<bool>(),
        k in prop::sample::select(vec![1usize, 3, 5, 7]),
        h in 6usize..12,
        seed in 0u64..10_000,
    ) {
        let c = 3;
        let groups = if depthwise { c } else { 1 };
        let spec = ConvSpec::new(c, c, k).stride(stride).dilation(dilation).groups(groups).same();
        let x = uniform(Shape::new(2, c, h, h + 1), seed);
        let w = uniform(spec.weight_shape(), seed + 1);
        let fast = conv2d_forward(&x, &w, None, &spec).unwrap();
        let slow = naive_conv2d(&x, &w, None, &spec);
        prop_assert!(fast.max_abs_diff(&slow) < 1e-10);
    }

    #[test]
    fn fixture_round_trip(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let t = uniform(Shape::new(n, c, h, w), seed);
        prop_assert_eq!(fixture::decode(&fixture::encode(&t)).unwrap(), t);
    }
}
