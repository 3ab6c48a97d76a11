//! Fusing mid-layer tap activations with the final embedding.
//!
//! Each tap is pooled to a vector (flattened, which keeps spatial layout,
//! or channel-averaged, which discards it), the pooled taps are
//! concatenated, optionally reduced by a linear layer, and the mid and
//! final blocks are L2-normalized independently before the final
//! concatenation — so both blocks contribute at comparable scale and the
//! squared fused distance splits into per-block squared distances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    bind_params, forward_with_taps, BackboneConfig, BoundParams, FeatureShape, ForwardOutput,
    NetworkParams,
};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Tape, Tensor, ValueId};

pub const REDUCE_WEIGHTS: &str = "fusion.reduce.weights";
pub const REDUCE_BIAS: &str = "fusion.reduce.bias";
const NORM_EPS: crate::tensor::Real = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Keep the spatial layout: `[H, W, C] -> [H*W*C]`.
    Flatten,
    /// Discard the spatial layout: `[H, W, C] -> [C]` channel means.
    Gap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub layer: String,
    pub pool: PoolMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    /// Taps to fuse, in descriptor order. Empty means no fusion: the
    /// descriptor is the normalized final feature alone.
    #[serde(default)]
    pub taps: Vec<TapSpec>,
    /// Width of an optional linear reduction applied to the concatenated
    /// mid vector.
    #[serde(default)]
    pub reduce_to: Option<usize>,
    #[serde(default = "default_true")]
    pub normalize_blocks: bool,
}

fn default_true() -> bool {
    true
}

impl FusionSpec {
    /// Final feature only; `fuse` degenerates to L2 normalization.
    pub fn vanilla() -> Self {
        FusionSpec {
            taps: Vec::new(),
            reduce_to: None,
            normalize_blocks: true,
        }
    }

    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for tap in &self.taps {
            if !config.tap_points.iter().any(|t| t == &tap.layer) {
                return Err(Error::config(format!(
                    "fusion tap '{}' is not a tap point of the backbone",
                    tap.layer
                )));
            }
            if !seen.insert(&tap.layer) {
                return Err(Error::config(format!("duplicate fusion tap '{}'", tap.layer)));
            }
            if !matches!(config.shape_of(&tap.layer)?, FeatureShape::Spatial(..)) {
                return Err(Error::config(format!(
                    "fusion tap '{}' must be a spatial layer",
                    tap.layer
                )));
            }
        }
        match self.reduce_to {
            Some(0) => return Err(Error::config("reduce_to must be positive")),
            Some(_) if self.taps.is_empty() => {
                return Err(Error::config("reduce_to without any taps"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Length of the pooled-and-concatenated mid vector before any
    /// reduction; `None` when there are no taps.
    pub fn mid_len(&self, config: &BackboneConfig) -> Result<Option<usize>> {
        if self.taps.is_empty() {
            return Ok(None);
        }
        let mut total = 0;
        for tap in &self.taps {
            let FeatureShape::Spatial(h, w, c) = config.shape_of(&tap.layer)? else {
                return Err(Error::config(format!(
                    "fusion tap '{}' must be a spatial layer",
                    tap.layer
                )));
            };
            total += match tap.pool {
                PoolMode::Flatten => h * w * c,
                PoolMode::Gap => c,
            };
        }
        Ok(Some(total))
    }

    /// Length of the full fused descriptor.
    pub fn fused_len(&self, config: &BackboneConfig) -> Result<usize> {
        let final_len = config.final_len()?;
        Ok(match self.mid_len(config)? {
            None => final_len,
            Some(mid) => self.reduce_to.unwrap_or(mid) + final_len,
        })
    }
}

/// Pool one tap activation to a vector.
pub fn pool_tap(tape: &mut Tape, tap: ValueId, mode: PoolMode) -> Result<ValueId> {
    match mode {
        PoolMode::Flatten => tape.flatten(tap),
        PoolMode::Gap => tape.global_average_pool(tap),
    }
}

/// Add He-initialized reduction parameters for `spec` (if it reduces) to
/// `params`, drawing from `rng`.
pub fn init_fusion_params<R: Rng>(
    config: &BackboneConfig,
    spec: &FusionSpec,
    rng: &mut R,
    params: &mut NetworkParams,
) -> Result<()> {
    spec.validate(config)?;
    if let (Some(width), Some(mid)) = (spec.reduce_to, spec.mid_len(config)?) {
        params.insert(
            REDUCE_WEIGHTS,
            crate::backbone::he_tensor(vec![mid, width], mid, rng),
        );
        params.insert(REDUCE_BIAS, Tensor::zeros([width]));
    }
    Ok(())
}

/// Build the fused descriptor from a forward pass. With taps:
/// `concat(norm(reduce(concat(pool(tap_i)))), norm(final))`; without:
/// `norm(final)`.
pub fn fuse(
    tape: &mut Tape,
    bound: &BoundParams,
    spec: &FusionSpec,
    forward: &ForwardOutput,
) -> Result<ValueId> {
    let mut final_feature = forward.final_feature;
    if tape.shape(final_feature).len() == 3 {
        final_feature = tape.flatten(final_feature)?;
    }
    let final_block = if spec.normalize_blocks {
        tape.l2_normalize(final_feature, NORM_EPS)?
    } else {
        final_feature
    };
    if spec.taps.is_empty() {
        return Ok(final_block);
    }

    let mut pooled = Vec::with_capacity(spec.taps.len());
    for tap in &spec.taps {
        let id = forward.taps.get(&tap.layer).copied().ok_or_else(|| {
            Error::config(format!(
                "fusion tap '{}' was not exported by the forward pass",
                tap.layer
            ))
        })?;
        pooled.push(pool_tap(tape, id, tap.pool)?);
    }
    let mut mid = if pooled.len() == 1 {
        pooled[0]
    } else {
        tape.concatenate(&pooled)?
    };
    if spec.reduce_to.is_some() {
        let weights = bound.id(REDUCE_WEIGHTS)?;
        let bias = bound.id(REDUCE_BIAS)?;
        mid = tape.fully_connected(mid, weights, bias, Activation::Linear)?;
    }
    let mid_block = if spec.normalize_blocks {
        tape.l2_normalize(mid, NORM_EPS)?
    } else {
        mid
    };
    tape.concatenate(&[mid_block, final_block])
}

/// Fuse taps of an already-trained model without touching its weights:
/// run a frozen forward pass and apply the same fusion arithmetic. This
/// is how fusion is evaluated on a checkpoint that was trained without
/// it.
pub fn fuse_frozen(
    params: &NetworkParams,
    config: &BackboneConfig,
    spec: &FusionSpec,
    image: &Tensor,
) -> Result<Tensor> {
    spec.validate(config)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false);
    let image_id = tape.leaf(image.clone());
    let forward = forward_with_taps(&mut tape, &bound, config, image_id)?;
    let fused = fuse(&mut tape, &bound, spec, &forward)?;
    Ok(tape.tensor(fused).clone())
}
