//! Distance algebra of the fused descriptor: the block-normalized
//! concatenation must split squared distances across blocks, an empty tap
//! set must collapse to the plain normalized final feature, and the two
//! pooling modes must react differently to spatial translation.

use std::collections::BTreeMap;

use midfuse_core::backbone::{
    bind_params, build_backbone, forward_with_taps, mini_aligned_net, ForwardOutput,
    NetworkParams,
};
use midfuse_core::fusion::{
    fuse, fuse_frozen, pool_tap, FusionSpec, PoolMode, TapSpec, REDUCE_BIAS, REDUCE_WEIGHTS,
};
use midfuse_core::synth::{
    generate_instances, render_with_pose, Domain, Pose, RenderConfig,
};
use midfuse_core::tensor::{Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn squared_distance(a: &[Real], b: &[Real]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn dot(a: &[Real], b: &[Real]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(a: &[Real]) -> f64 {
    dot(a, a).sqrt()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// One fused descriptor built through the real `fuse` pipeline from
/// synthetic tap activations and a synthetic final feature.
fn fused_descriptor(
    tape: &mut Tape,
    bound: &midfuse_core::backbone::BoundParams,
    spec: &FusionSpec,
    tap_shapes: &[(String, Vec<usize>)],
    final_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Real> {
    let mut taps = BTreeMap::new();
    for (name, shape) in tap_shapes {
        let id = tape.leaf(random_tensor(rng, shape.clone()));
        taps.insert(name.clone(), id);
    }
    let final_feature = tape.leaf(random_tensor(rng, vec![final_len]));
    let forward = ForwardOutput {
        final_feature,
        taps,
    };
    let fused = fuse(tape, bound, spec, &forward).unwrap();
    tape.tensor(fused).data().to_vec()
}

#[test]
fn squared_distance_decomposes_across_blocks_for_a_thousand_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_split = 0.0f64;
    let mut worst_inner = 0.0f64;
    for case in 0..1000 {
        // A random fusion layout: 1-3 spatial taps, random pooling per
        // tap, sometimes a linear reduction of the concatenated mids.
        let n_taps = rng.random_range(1..=3usize);
        let mut tap_shapes = Vec::new();
        let mut tap_specs = Vec::new();
        let mut mid_len = 0usize;
        for t in 0..n_taps {
            let h = rng.random_range(1..=4usize);
            let w = rng.random_range(1..=4usize);
            let c = rng.random_range(1..=8usize);
            let pool = if rng.random_bool(0.5) {
                PoolMode::Flatten
            } else {
                PoolMode::Gap
            };
            mid_len += match pool {
                PoolMode::Flatten => h * w * c,
                PoolMode::Gap => c,
            };
            let name = format!("t{t}");
            tap_shapes.push((name.clone(), vec![h, w, c]));
            tap_specs.push(TapSpec { layer: name, pool });
        }
        let reduce_to = if rng.random_bool(0.33) {
            Some(rng.random_range(1..=16usize))
        } else {
            None
        };
        let spec = FusionSpec {
            taps: tap_specs,
            reduce_to,
            normalize_blocks: true,
        };
        let final_len = rng.random_range(3..=32usize);
        let mid_block_len = reduce_to.unwrap_or(mid_len);

        let mut params = NetworkParams::new();
        if let Some(width) = reduce_to {
            params.insert(REDUCE_WEIGHTS, random_tensor(&mut rng, vec![mid_len, width]));
            params.insert(REDUCE_BIAS, random_tensor(&mut rng, vec![width]));
        }
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params, false);

        let za = fused_descriptor(&mut tape, &bound, &spec, &tap_shapes, final_len, &mut rng);
        let zb = fused_descriptor(&mut tape, &bound, &spec, &tap_shapes, final_len, &mut rng);
        assert_eq!(za.len(), mid_block_len + final_len, "case {case}");

        let (ma, fa) = za.split_at(mid_block_len);
        let (mb, fb) = zb.split_at(mid_block_len);
        for (label, block) in [("mid a", ma), ("mid b", mb), ("final a", fa), ("final b", fb)] {
            let n = norm(block);
            assert!(
                (n - 1.0).abs() < 1e-5,
                "case {case}: {label} block norm {n}"
            );
        }

        // Form 1: the fused squared distance is the sum of the block
        // squared distances.
        let whole = squared_distance(&za, &zb);
        let split = squared_distance(ma, mb) + squared_distance(fa, fb);
        worst_split = worst_split.max((whole - split).abs());

        // Form 2: with unit-norm blocks it collapses to inner products.
        let inner = 4.0 - 2.0 * dot(ma, mb) - 2.0 * dot(fa, fb);
        worst_inner = worst_inner.max((whole - inner).abs());
    }
    assert!(worst_split <= 1e-5, "block-split error {worst_split:e}");
    assert!(worst_inner <= 1e-5, "inner-product error {worst_inner:e}");
}

#[test]
fn empty_tap_fusion_is_bitwise_the_normalized_final_feature() {
    let cfg = mini_aligned_net();
    let params = build_backbone(&cfg, 13).unwrap();
    let empty = FusionSpec {
        taps: Vec::new(),
        reduce_to: None,
        normalize_blocks: true,
    };
    assert_eq!(empty, FusionSpec::vanilla());

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let image = random_tensor(&mut rng, cfg.input_shape.to_vec());
        let fused = fuse_frozen(&params, &cfg, &empty, &image).unwrap();

        // Rebuild the vanilla descriptor without the fusion layer: plain
        // forward pass, then L2 normalization of the final feature.
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params, false);
        let image_id = tape.leaf(image);
        let forward = forward_with_taps(&mut tape, &bound, &cfg, image_id).unwrap();
        let mut final_feature = forward.final_feature;
        if tape.shape(final_feature).len() == 3 {
            final_feature = tape.flatten(final_feature).unwrap();
        }
        let normalized = tape.l2_normalize(final_feature, 1e-12).unwrap();

        assert_eq!(fused.data(), tape.tensor(normalized).data());
    }
}

#[test]
fn one_pixel_translation_moves_flatten_strictly_more_than_gap() {
    let cfg = mini_aligned_net();
    let params = build_backbone(&cfg, 7).unwrap();
    let instances = generate_instances(40, 21).unwrap();
    let mut render_cfg = RenderConfig::aligned(Domain::Filled, 1);
    render_cfg.noise_std = 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shifted = Pose {
        dx: 1.0,
        dy: 0.0,
        rotation_deg: 0.0,
        flip: false,
    };

    let mut gap_strictly_less = 0usize;
    for (i, spec) in instances.iter().enumerate() {
        let base = render_with_pose(spec, &render_cfg, &Pose::identity(), &mut rng).unwrap();
        let moved = render_with_pose(spec, &render_cfg, &shifted, &mut rng).unwrap();

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params, false);
        let mut pooled = |image: Tensor, mode: PoolMode| {
            let id = tape.leaf(image);
            let forward = forward_with_taps(&mut tape, &bound, &cfg, id).unwrap();
            let tap = forward.taps["conv3"];
            let out = pool_tap(&mut tape, tap, mode).unwrap();
            tape.tensor(out).data().to_vec()
        };
        let flat_change = squared_distance(
            &pooled(base.clone(), PoolMode::Flatten),
            &pooled(moved.clone(), PoolMode::Flatten),
        )
        .sqrt();
        let gap_change = squared_distance(
            &pooled(base, PoolMode::Gap),
            &pooled(moved, PoolMode::Gap),
        )
        .sqrt();

        assert!(
            flat_change > 0.0,
            "instance {i}: translation left the flattened tap unchanged"
        );
        if gap_change < flat_change {
            gap_strictly_less += 1;
        }
    }
    assert!(
        gap_strictly_less * 10 >= instances.len() * 9,
        "gap pooling absorbed the translation on only {gap_strictly_less}/{} instances",
        instances.len()
    );
}
