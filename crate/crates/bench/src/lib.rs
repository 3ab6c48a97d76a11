//! Deterministic fixtures shared by the criterion benchmark targets.

use midfuse_core::backbone::{
    bind_params, build_backbone, forward_with_taps, mini_aligned_net, BackboneConfig,
    NetworkParams,
};
use midfuse_core::fusion::{fuse, FusionSpec, PoolMode, TapSpec};
use midfuse_core::loss::{triplet_ranking_loss, DEFAULT_MARGIN};
use midfuse_core::tensor::{Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The pose-aligned preset with freshly initialized weights.
pub fn aligned_backbone(seed: u64) -> (BackboneConfig, NetworkParams) {
    let cfg = mini_aligned_net();
    let params = build_backbone(&cfg, seed).expect("preset builds");
    (cfg, params)
}

/// Flatten-pooled fusion of the preset's tap layer.
pub fn flatten_fusion() -> FusionSpec {
    FusionSpec {
        taps: vec![TapSpec {
            layer: "conv3".into(),
            pool: PoolMode::Flatten,
        }],
        reduce_to: None,
        normalize_blocks: true,
    }
}

pub fn random_image(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.0..1.0))
}

/// A query feature plus a gallery of `n` features of width `len`.
pub fn feature_gallery(n: usize, len: usize, seed: u64) -> (Tensor, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feature = || {
        Tensor::from_fn(vec![len], |_| rng.random_range(-1.0..1.0 as Real))
    };
    let query = feature();
    let gallery = (0..n).map(|_| feature()).collect();
    (query, gallery)
}

/// One full triplet step: forward three images through the fused
/// descriptor, evaluate the ranking loss, and backpropagate to every
/// parameter. Returns the loss value.
pub fn triplet_step(
    cfg: &BackboneConfig,
    params: &NetworkParams,
    spec: &FusionSpec,
    query: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
) -> Real {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, true);
    let mut descriptor = |image: &Tensor| {
        let id = tape.leaf(image.clone());
        let forward = forward_with_taps(&mut tape, &bound, cfg, id).expect("forward");
        fuse(&mut tape, &bound, spec, &forward).expect("fuse")
    };
    let q = descriptor(query);
    let p = descriptor(positive);
    let n = descriptor(negative);
    let loss = triplet_ranking_loss(&mut tape, q, p, n, DEFAULT_MARGIN).expect("loss");
    tape.backward(loss).expect("backward");
    tape.value(loss)[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_produce_a_finite_triplet_loss() {
        let (cfg, params) = aligned_backbone(1);
        let spec = flatten_fusion();
        let q = random_image(&cfg.input_shape, 1);
        let p = random_image(&cfg.input_shape, 2);
        let n = random_image(&cfg.input_shape, 3);
        let loss = triplet_step(&cfg, &params, &spec, &q, &p, &n);
        assert!(loss.is_finite() && loss >= 0.0, "loss {loss}");

        let (query, gallery) = feature_gallery(10, 8, 4);
        assert_eq!(query.numel(), 8);
        assert_eq!(gallery.len(), 10);
    }
}
