//! Training objectives: a margin-based triplet ranking loss over fused
//! descriptors, and softmax cross-entropy over identity labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BoundParams, NetworkParams};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Real, Tape, Tensor, ValueId};

pub const DEFAULT_MARGIN: Real = 0.3;
pub const HEAD_WEIGHTS: &str = "head.weights";
pub const HEAD_BIAS: &str = "head.bias";

/// `max(0, margin + d(query, positive) - d(query, negative))` with
/// Euclidean distances, built from tape primitives so the hinge kink is
/// tracked like any other relu.
pub fn triplet_ranking_loss(
    tape: &mut Tape,
    query: ValueId,
    positive: ValueId,
    negative: ValueId,
    margin: Real,
) -> Result<ValueId> {
    if !(margin >= 0.0) {
        return Err(Error::config(format!("margin must be non-negative, got {margin}")));
    }
    let d_pos = tape.euclidean_distance(query, positive)?;
    let d_neg = tape.euclidean_distance(query, negative)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let shifted = tape.add_scalar(gap, margin);
    Ok(tape.relu(shifted))
}

/// Linear classifier over a descriptor, trained with softmax
/// cross-entropy against instance identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub input_len: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new(input_len: usize, classes: usize) -> Result<Self> {
        if input_len == 0 {
            return Err(Error::config("classifier input length must be positive"));
        }
        if classes < 2 {
            return Err(Error::config(format!(
                "classifier needs at least 2 classes, got {classes}"
            )));
        }
        Ok(ClassifierHead { input_len, classes })
    }

    /// Add `head.weights` / `head.bias` to the parameter set.
    pub fn init_params<R: Rng>(&self, rng: &mut R, params: &mut NetworkParams) {
        params.insert(
            HEAD_WEIGHTS,
            crate::backbone::he_tensor(
                vec![self.input_len, self.classes],
                self.input_len,
                rng,
            ),
        );
        params.insert(HEAD_BIAS, Tensor::zeros([self.classes]));
    }

    /// Head logits for a descriptor without touching a tape; used when
    /// measuring classification accuracy.
    pub fn logits_frozen(&self, params: &NetworkParams, feature: &Tensor) -> Result<Vec<Real>> {
        if feature.numel() != self.input_len {
            return Err(Error::shape(
                "logits_frozen",
                format!("feature has {} values, head expects {}", feature.numel(), self.input_len),
            ));
        }
        let weights = params
            .get(HEAD_WEIGHTS)
            .ok_or_else(|| Error::config(format!("missing parameter {HEAD_WEIGHTS:?}")))?;
        let bias = params
            .get(HEAD_BIAS)
            .ok_or_else(|| Error::config(format!("missing parameter {HEAD_BIAS:?}")))?;
        if weights.shape() != [self.input_len, self.classes] || bias.shape() != [self.classes] {
            return Err(Error::shape(
                "logits_frozen",
                format!(
                    "head params {:?}/{:?} do not match ({}, {})",
                    weights.shape(),
                    bias.shape(),
                    self.input_len,
                    self.classes
                ),
            ));
        }
        let mut logits = bias.data().to_vec();
        for (i, &x) in feature.data().iter().enumerate() {
            for (k, logit) in logits.iter_mut().enumerate() {
                *logit += x * weights.data()[i * self.classes + k];
            }
        }
        Ok(logits)
    }
}

/// Cross-entropy of the head's logits for one descriptor against its
/// identity label.
pub fn identity_classification_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    feature: ValueId,
    label: usize,
) -> Result<ValueId> {
    let weights = bound.id(HEAD_WEIGHTS)?;
    let bias = bound.id(HEAD_BIAS)?;
    let logits = tape.fully_connected(feature, weights, bias, Activation::Linear)?;
    tape.softmax_cross_entropy(logits, label)
}
