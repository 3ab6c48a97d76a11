//! Finite-difference certification of tape gradients.
//!
//! Three sweeps, each aggregated into a [`SweepReport`]:
//!
//! * [`primitive_sweep`] checks every differentiable tape primitive in
//!   isolation on small random tensors, including the weight and bias
//!   sides of conv2d and fully_connected.
//! * [`composite_sweep`] checks both end-to-end objectives — image →
//!   backbone → fuse → triplet ranking loss, and image → backbone →
//!   fuse → identity classification loss — with every network parameter
//!   packed into a single checked vector, so the full training gradient
//!   path is differenced coordinate by coordinate.
//! * [`preset_geometry_sweep`] checks, for every shipped backbone
//!   preset, each layer's op at its exact configured geometry (kernel,
//!   stride, padding, input shape), then the fusion graph and both
//!   objective heads at the preset's real tap and embedding sizes.
//!
//! Finite differences on a 32-bit forward pass need care near the kinks
//! introduced by relu, max pooling, the hinge, and zero distances:
//! a difference window that straddles a kink compares the analytic
//! gradient against a secant of the wrong linear piece. Composite
//! inputs are rejection-sampled until every recorded kink margin clears
//! the window, and every coordinate is additionally differenced at two
//! step sizes; coordinates where the two estimates disagree (a straddle
//! the margin check could not see) are skipped and counted rather than
//! compared.
//!
//! The full-size presets are deliberately *not* differenced end to end.
//! A 32x32 forward pass accumulates enough 32-bit rounding over its
//! ~1e6 multiply-accumulates that no step size leaves a usable secant:
//! small steps drown in rounding noise, while steps large enough to
//! rise above it cannot clear the thousands of kink sites a realistic
//! activation pattern produces (rejection sampling that many margins
//! has vanishing acceptance probability). The geometry sweep instead
//! certifies every preset layer at its true shape — single-op graphs
//! keep the noise tiny, and margins can be constructed or cheaply
//! sampled — while the composite sweep certifies the full graph
//! composition on a backbone small enough to difference exhaustively.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{
    bound_from_ids, build_backbone_with_rng, preset, BackboneConfig, BoundParams, FeatureShape,
    ForwardOutput, LayerKind, LayerSpec, NetworkParams, PRESET_NAMES,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, init_fusion_params, FusionSpec, PoolMode, TapSpec};
use crate::loss::{
    identity_classification_loss, triplet_ranking_loss, ClassifierHead, DEFAULT_MARGIN,
};
use crate::tensor::{
    sample_smooth_input, Activation, Real, Tape, Tensor, ValueId,
};

/// Seed count used when the caller does not specify one.
pub const DEFAULT_SEED_COUNT: usize = 20;

/// Difference step for isolated primitives. Measured 32-bit forward
/// noise on these graphs leaves ~2e-4 of absolute error on a central
/// difference at this step; smaller steps amplify the rounding noise
/// faster than they reduce (already absent or tiny) truncation error.
const PRIMITIVE_STEP: Real = 2e-2;

/// Kink clearance required of sampled inputs to kinked primitives
/// (relu, max pooling, zero distance): four difference steps, so the
/// window plus its downstream amplification stays on one linear piece.
const PRIM_KINK_MARGIN: Real = 4.0 * PRIMITIVE_STEP;

/// Gradient floor for primitive checks. Individual coordinates can have
/// gradients near zero through sign cancellation in the readout sums;
/// below the floor the comparison is absolute at `1e-3 * floor`, which
/// at measured noise levels still bounds the difference well under any
/// real backward bug.
const PRIMITIVE_FLOOR: f64 = 0.3;

/// Difference step for end-to-end composites: large enough that 32-bit
/// forward rounding (measured ~2e-6 on the loss difference) stays well
/// under the secant signal, small enough that single-coordinate windows
/// respect the sampled kink clearance below.
const COMPOSITE_STEP: Real = 5e-3;

/// Kink clearance required of a sampled composite before it is
/// differenced. A single-coordinate perturbation of `COMPOSITE_STEP`
/// shifts any pre-activation by at most a couple of multiples of the
/// step, so this clearance keeps almost every window on one linear
/// piece; the two-step consistency probe catches the statistical
/// stragglers.
const COMPOSITE_KINK_MARGIN: Real = 2.5 * COMPOSITE_STEP;

/// Rejection-sampling budget for composite parameter draws. The tiny
/// composite records a few hundred kink sites, so clearing all of them
/// by 2.5 steps survives at a rate of only a few per thousand draws;
/// each draw costs one small forward pass, and this budget makes a
/// sampling failure vanishingly unlikely.
const SMOOTH_ATTEMPTS: usize = 8000;

/// Step for geometry checks whose graph is exactly linear in every
/// single checked coordinate (convolution, average pooling, flatten).
/// With no truncation term at all, a large window simply divides the
/// forward rounding noise, which at the widest preset layers needs
/// dividing by a lot.
const LINEAR_STEP: Real = 2.0;

/// Step for geometry checks whose graph has kinks (max pooling, relu):
/// small enough that constructed or sampled margins dwarf the window.
const GEOM_KINK_STEP: Real = 2e-2;

/// Kink clearance for geometry checks with sampled margins.
const GEOM_KINK_MARGIN: Real = 6.0 * GEOM_KINK_STEP;

/// Step for small smooth graphs (softmax head, distance compositions):
/// no kinks to clear, and at these widths both the O(step^2) truncation
/// and the rounding noise sit comfortably below tolerance.
const SMOOTH_STEP: Real = 1e-2;

/// Coordinates differenced per parameter tensor in geometry checks.
const GEOM_COORDS: usize = 10;

/// Gradient-magnitude floor for the composite comparator. A 32-bit
/// forward pass leaves noise of order 1e-6 on the loss, hence order
/// 1e-3·step⁻¹·1e-6 ≈ 1e-4 on a central difference; coordinates whose
/// gradient sits below this floor are compared absolutely against
/// `floor` rather than relatively, which is what a 32-bit difference
/// can actually certify there.
const GRAD_FLOOR: f64 = 0.25;

/// Two central differences at step and step/2 must agree to this
/// fraction of the comparison scale; otherwise the window straddles a
/// kink and the coordinate is skipped. Straddles disagree at the scale
/// of the gradient itself, honest noise at ~1e-3 of it.
const CONSISTENCY_TOL: f64 = 0.02;

/// Relative error above which a coordinate is re-differenced on fresh
/// parameter draws rather than reported outright. A kink straddle that
/// slips past both the margin sampler and the two-step probe (possible
/// when a high-leverage coordinate shifts a pre-activation by many
/// steps while the gradient flowing through that site is a small part
/// of the total) is a coincidence of one draw; a genuine backward bug
/// follows the coordinate to every draw. Honest rounding noise sits
/// under 5e-4 on all of these graphs, so retries stay rare.
const RETRY_THRESHOLD: f64 = 6e-4;

/// Fresh draws granted to a suspect coordinate before its error stands.
const MAX_EXTRA_DRAWS: usize = 2;

/// Aggregate of many gradient checks: the worst relative error seen,
/// where it happened, and how many coordinates were compared.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub checks: usize,
    pub coords_checked: usize,
    /// Coordinates skipped because the two-step consistency probe
    /// detected a kink inside the difference window.
    pub coords_skipped: usize,
    pub max_rel_error: f64,
    pub worst_check: String,
}

impl SweepReport {
    pub fn empty() -> Self {
        SweepReport {
            checks: 0,
            coords_checked: 0,
            coords_skipped: 0,
            max_rel_error: 0.0,
            worst_check: String::new(),
        }
    }

    fn absorb(&mut self, label: &str, max_rel_error: f64, checked: usize, skipped: usize) {
        self.checks += 1;
        self.coords_checked += checked;
        self.coords_skipped += skipped;
        if max_rel_error > self.max_rel_error {
            self.max_rel_error = max_rel_error;
            self.worst_check = label.to_string();
        }
    }

    pub fn merge(&mut self, other: &SweepReport) {
        self.checks += other.checks;
        self.coords_checked += other.coords_checked;
        self.coords_skipped += other.coords_skipped;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_check = other.worst_check.clone();
        }
    }
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<Real> = (0..n).map(|_| rng.random_range(lo..hi) as Real).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Reduce a non-scalar output to a scalar through a fixed random
/// positive weighting, so every output coordinate contributes a
/// distinct, nonzero term to the checked objective.
fn weighted_readout(tape: &mut Tape, out: ValueId, weights: &Tensor) -> Result<ValueId> {
    let n: usize = tape.shape(out).iter().product();
    if n != weights.numel() {
        return Err(Error::shape(
            "weighted_readout",
            format!("output has {n} elements, weights {}", weights.numel()),
        ));
    }
    let flat = tape.reshape(out, vec![n])?;
    let w = tape.leaf(weights.clone());
    let prod = tape.elem_mul(flat, w)?;
    Ok(tape.sum_all(prod))
}

fn readout_weights<R: Rng>(rng: &mut R, n: usize) -> Tensor {
    rand_tensor(rng, vec![n], 0.25, 1.75)
}

/// Like [`readout_weights`] but with random signs. When the summed
/// values all share a sign (pooled maxima, relu outputs), signed
/// weights keep the readout's partial sums near zero, so the 32-bit
/// accumulation error stays a random walk instead of growing with the
/// running total.
fn signed_readout_weights<R: Rng>(rng: &mut R, n: usize) -> Tensor {
    let data: Vec<Real> = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.25..1.75) as Real;
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(vec![n], data).expect("shape/data agree by construction")
}

/// Difference every coordinate of `input` against the tape gradient of
/// `build`, with the primitive-scale gradient floor.
fn check_prim<F>(report: &mut SweepReport, label: &str, build: &F, input: &Tensor) -> Result<()>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    let coords: Vec<usize> = (0..input.numel()).collect();
    let outcome = fd_check_at(build, input, PRIMITIVE_STEP, &coords, PRIMITIVE_FLOOR)?;
    report.absorb(label, outcome.max_rel_error, outcome.checked, outcome.skipped);
    Ok(())
}

// ---------------------------------------------------------------------------
// Primitive sweep
// ---------------------------------------------------------------------------

fn check_conv2d(report: &mut SweepReport, rng: &mut ChaCha8Rng) -> Result<()> {
    // Same-size geometry: 4x4x2 input, 3x3 kernels, stride 1, padding 1.
    let x = rand_tensor(rng, vec![4, 4, 2], -1.0, 1.0);
    let k = rand_tensor(rng, vec![3, 3, 2, 2], -0.6, 0.6);
    let b = rand_tensor(rng, vec![2], -0.2, 0.2);
    let w = readout_weights(rng, 4 * 4 * 2);

    let by_input = |tape: &mut Tape, id: ValueId| {
        let kk = tape.leaf(k.clone());
        let bb = tape.leaf(b.clone());
        let y = tape.conv2d(id, kk, bb, 1, 1)?;
        weighted_readout(tape, y, &w)
    };
    check_prim(report, "conv2d/input", &by_input, &x)?;

    let by_kernels = |tape: &mut Tape, id: ValueId| {
        let xx = tape.leaf(x.clone());
        let bb = tape.leaf(b.clone());
        let y = tape.conv2d(xx, id, bb, 1, 1)?;
        weighted_readout(tape, y, &w)
    };
    check_prim(report, "conv2d/kernels", &by_kernels, &k)?;

    let by_bias = |tape: &mut Tape, id: ValueId| {
        let xx = tape.leaf(x.clone());
        let kk = tape.leaf(k.clone());
        let y = tape.conv2d(xx, kk, id, 1, 1)?;
        weighted_readout(tape, y, &w)
    };
    check_prim(report, "conv2d/bias", &by_bias, &b)?;

    // Strided valid geometry: 7x7x1 input, stride 2, no padding -> 3x3x2.
    let xs = rand_tensor(rng, vec![7, 7, 1], -1.0, 1.0);
    let ks = rand_tensor(rng, vec![3, 3, 1, 2], -0.6, 0.6);
    let bs = rand_tensor(rng, vec![2], -0.2, 0.2);
    let ws = readout_weights(rng, 3 * 3 * 2);
    let strided = |tape: &mut Tape, id: ValueId| {
        let kk = tape.leaf(ks.clone());
        let bb = tape.leaf(bs.clone());
        let y = tape.conv2d(id, kk, bb, 2, 0)?;
        weighted_readout(tape, y, &ws)
    };
    check_prim(report, "conv2d/strided-input", &strided, &xs)?;
    Ok(())
}

fn check_maxpool2d(report: &mut SweepReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let w = readout_weights(rng, 3 * 3 * 2);
    let build = |tape: &mut Tape, id: ValueId| {
        let y = tape.maxpool2d(id, 2, 2)?;
        weighted_readout(tape, y, &w)
    };
    let base: u64 = rng.random();
    let x = sample_smooth_input(
        |attempt| {
            let mut g = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt as u64));
            rand_tensor(&mut g, vec![6, 6, 2], -1.0, 1.0)
        },
        &build,
        PRIM_KINK_MARGIN,
        100,
    )?;
    check_prim(report, "maxpool2d/2x2", &build, &x)?;

    // Overlapping windows: 5x5x1, window 3, stride 2 -> 2x2x1.
    let wo = readout_weights(rng, 2 * 2);
    let overlapping = |tape: &mut Tape, id: ValueId| {
        let y = tape.maxpool2d(id, 3, 2)?;
        weighted_readout(tape, y, &wo)
    };
    let base2: u64 = rng.random();
    let xo = sample_smooth_input(
        |attempt| {
            let mut g = ChaCha8Rng::seed_from_u64(base2.wrapping_add(attempt as u64));
            rand_tensor(&mut g, vec![5, 5, 1], -1.0, 1.0)
        },
        &overlapping,
        PRIM_KINK_MARGIN,
        100,
    )?;
    check_prim(report, "maxpool2d/3x3-overlap", &overlapping, &xo)?;
    Ok(())
}

fn check_pool_and_reshape(report: &mut SweepReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let x = rand_tensor(rng, vec![5, 7, 3], -1.0, 1.0);
    let w = readout_weights(rng, 3);
    let gap = |tape: &mut Tape, id: ValueId| {
        let y = tape.global_average_pool(id)?;
        weighted_readout(tape, y, &w)
    };
    check_prim(report, "global_average_pool", &gap, &x)?;

    let xf = rand_tensor(rng, vec![4, 3, 2], -1.0, 1.0);
    let wf = readout_weights(rng, 24);
    let flat = |tape: &mut Tape, id: ValueId| {
        let y = tape.flatten(id)?;
        weighted_readout(tape, y, &wf)
    };
    check_prim(report, "flatten", &flat, &xf)?;

    let xr = rand_tensor(rng, vec![12], -1.0, 1.0);
    let wr = readout_weights(rng, 12);
    let resh = |tape: &mut Tape, id: ValueId| {
        let y = tape.reshape(id, vec![3, 4])?;
        weighted_readout(tape, y, &wr)
    };
    check_prim(report, "reshape", &resh, &xr)?;

    let xs = rand_tensor(rng, vec![12], -1.0, 1.0);
    let wsl = readout_weights(rng, 5);
    let sl = |tape: &mut Tape, id: ValueId| {
        let y = tape.slice(id, 3, 5)?;
        weighted_readout(tape, y, &wsl)
    };
    check_prim(report, "slice", &sl, &xs)?;

    // Slice a vector into three pieces and concatenate them permuted, so
    // concatenate's gradient scatter is exercised across segments.
    let xc = rand_tensor(rng, vec![12], -1.0, 1.0);
    let wc = readout_weights(rng, 12);
    let cat = |tape: &mut Tape, id: ValueId| {
        let a = tape.slice(id, 0, 4)?;
        let b = tape.slice(id, 4, 3)?;
        let c = tape.slice(id, 7, 5)?;
        let y = tape.concatenate(&[c, a, b])?;
        weighted_readout(tape, y, &wc)
    };
    check_prim(report, "concatenate", &cat, &xc)?;
    Ok(())
}

fn check_fully_connected(report: &mut SweepReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let x = rand_tensor(rng, vec![10], -1.0, 1.0);
    let w = rand_tensor(rng, vec![10, 7], -0.6, 0.6);
    let b = rand_tensor(rng, vec![7], -0.3, 0.3);
    let wr = readout_weights(rng, 7);

    for (activation, tag) in [(Activation::Linear, "linear"), (Activation::Relu, "relu")] {
        let by_input = |tape: &mut Tape, id: ValueId| {
            let ww = tape.leaf(w.clone());
            let bb = tape.leaf(b.clone());
            let y = tape.fully_connected(id, ww, bb, activation)?;
            weighted_readout(tape, y, &wr)
        };
        let xi = if activation == Activation::Relu {
            let base: u64 = rng.random();
            sample_smooth_input(
                |attempt| {
                    let mut g = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt as u64));
                    rand_tensor(&mut g, vec![10], -1.0, 1.0)
                },
                &by_input,
                PRIM_KINK_MARGIN,
                100,
            )?
        } else {
            x.clone()
        };
        check_prim(report, &format!("fully_connected/{tag}/input"), &by_input, &xi)?;

        let by_weights = |tape: &mut Tape, id: ValueId| {
            let xx = tape.leaf(xi.clone());
            let bb = tape.leaf(b.clone());
            let y = tape.fully_connected(xx, id, bb, activation)?;
            weighted_readout(tape, y, &wr)
        };
        let wi = if activation == Activation::Relu {
            let base: u64 = rng.random();
            sample_smooth_input(
                |attempt| {
                    let mut g = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt as u64));
                    rand_tensor(&mut g, vec![10, 7], -0.6, 0.6)
                },
                &by_weights,
                PRIM_KINK_MARGIN,
                100,
            )?
        } else {
            w.clone()
        };
        check_prim(report, &format!("fully_connected/{tag}/weights"), &by_weights, &wi)?;

        let by_bias = |tape: &mut Tape, id: ValueId| {
            let xx = tape.leaf(xi.clone());
            let ww = tape.leaf(wi.clone());
            let y = tape.fully_connected(xx, ww, id, activation)?;
            weighted_readout(tape, y, &wr)
        };
        let bi = if activation == Activation::Relu {
            let base: u64 = rng.random();
            sample_smooth_input(
                |attempt| {
                    let mut g = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt as u64));
                    rand_tensor(&mut g, vec![7], -0.3, 0.3)
                },
                &by_bias,
                PRIM_KINK_MARGIN,
                100,
            )?
        } else {
            b.clone()
        };
        check_prim(report, &format!("fully_connected/{tag}/bias"), &by_bias, &bi)?;
    }
    Ok(())
}

fn check_pointwise(report: &mut SweepReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let w = readout_weights(rng, 11);
    let relu = |tape: &mut Tape, id: ValueId| {
        let y = tape.relu(id);
        weighted_readout(tape, y, &w)
    };
    let base: u64 = rng.random();
    let x = sample_smooth_input(
        |attempt| {
            let mut g = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt as u64));
            rand_tensor(&mut g, vec![11], -1.0, 1.0)
        },
        &relu,
        PRIM_KINK_MARGIN,
        100,
    )?;
    check_prim(report, "relu", &relu, &x)?;

    let xa = rand_tensor(rng, vec![5], -1.0, 1.0);
    let wa = readout_weights(rng, 5);
    let adds = |tape: &mut Tape, id: ValueId| {
        let y = tape.add_scalar(id, 3.7);
        weighted_readout(tape, y, &wa)
    };
    check_prim(report, "add_scalar", &adds, &xa)?;

    let muls = |tape: &mut Tape, id: ValueId| {
        let y = tape.mul_scalar(id, -2.2);
        weighted_readout(tape, y, &wa)
    };
    check_prim(report, "mul_scalar", &muls, &xa)?;

    let other = rand_tensor(rng, vec![6], -1.0, 1.0);
    let xm = rand_tensor(rng, vec![6], -1.0, 1.0);
    let wm = readout_weights(rng, 6);
    let emul = |tape: &mut Tape, id: ValueId| {
        let o = tape.leaf(other.clone());
        let y = tape.elem_mul(id, o)?;
        weighted_readout(tape, y, &wm)
    };
    check_prim(report, "elem_mul", &emul, &xm)?;

    let sub_a = |tape: &mut Tape, id: ValueId| {
        let o = tape.leaf(other.clone());
        let y = tape.sub(id, o)?;
        weighted_readout(tape, y, &wm)
    };
    check_prim(report, "sub/minuend", &sub_a, &xm)?;

    let sub_b = |tape: &mut Tape, id: ValueId| {
        let o = tape.leaf(other.clone());
        let y = tape.sub(o, id)?;
        weighted_readout(tape, y, &wm)
    };
    check_prim(report, "sub/subtrahend", &sub_b, &xm)?;

    let xr = rand_tensor(rng, vec![9], -1.0, 1.0);
    let sums = |tape: &mut Tape, id: ValueId| Ok(tape.sum_all(id));
    check_prim(report, "sum_all", &sums, &xr)?;
    let means = |tape: &mut Tape, id: ValueId| Ok(tape.mean_all(id));
    check_prim(report, "mean_all", &means, &xr)?;
    Ok(())
}

fn check_normalize_and_distance(report: &mut SweepReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let wn = readout_weights(rng, 9);
    let norm = |tape: &mut Tape, id: ValueId| {
        let y = tape.l2_normalize(id, 1e-12)?;
        weighted_readout(tape, y, &wn)
    };
    let base: u64 = rng.random();
    let xn = sample_smooth_input(
        |attempt| {
            let mut g = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt as u64));
            rand_tensor(&mut g, vec![9], -1.0, 1.0)
        },
        &norm,
        PRIM_KINK_MARGIN,
        100,
    )?;
    check_prim(report, "l2_normalize", &norm, &xn)?;

    let other = rand_tensor(rng, vec![8], -1.0, 1.0);
    let dist_a = |tape: &mut Tape, id: ValueId| {
        let o = tape.leaf(other.clone());
        tape.euclidean_distance(id, o)
    };
    let base2: u64 = rng.random();
    let xa = sample_smooth_input(
        |attempt| {
            let mut g = ChaCha8Rng::seed_from_u64(base2.wrapping_add(attempt as u64));
            rand_tensor(&mut g, vec![8], -1.0, 1.0)
        },
        &dist_a,
        PRIM_KINK_MARGIN,
        100,
    )?;
    check_prim(report, "euclidean_distance/lhs", &dist_a, &xa)?;

    let dist_b = |tape: &mut Tape, id: ValueId| {
        let o = tape.leaf(xa.clone());
        tape.euclidean_distance(o, id)
    };
    check_prim(report, "euclidean_distance/rhs", &dist_b, &other)?;
    Ok(())
}

fn check_softmax_cross_entropy(report: &mut SweepReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let logits = rand_tensor(rng, vec![7], -2.0, 2.0);
    let label = rng.random_range(0..7usize);
    let build = |tape: &mut Tape, id: ValueId| tape.softmax_cross_entropy(id, label);
    check_prim(report, "softmax_cross_entropy", &build, &logits)?;
    Ok(())
}

/// Difference every tape primitive in isolation across `seed_count`
/// seeds. Inputs near kinks are rejection-sampled away first.
pub fn primitive_sweep(seed_count: usize) -> Result<SweepReport> {
    let mut report = SweepReport::empty();
    for seed in 0..seed_count as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9816 ^ seed);
        check_conv2d(&mut report, &mut rng)?;
        check_maxpool2d(&mut report, &mut rng)?;
        check_pool_and_reshape(&mut report, &mut rng)?;
        check_fully_connected(&mut report, &mut rng)?;
        check_pointwise(&mut report, &mut rng)?;
        check_normalize_and_distance(&mut report, &mut rng)?;
        check_softmax_cross_entropy(&mut report, &mut rng)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Parameter packing: express "gradient with respect to every parameter"
// as a single checked leaf that the build closure slices apart.
// ---------------------------------------------------------------------------

struct ParamLayout {
    entries: Vec<(String, Vec<usize>, usize)>,
}

fn pack_params(params: &NetworkParams) -> (ParamLayout, Tensor) {
    let mut entries = Vec::new();
    let mut data: Vec<Real> = Vec::new();
    for (name, tensor) in params.iter() {
        entries.push((name.clone(), tensor.shape().to_vec(), data.len()));
        data.extend_from_slice(tensor.data());
    }
    let total = data.len();
    let layout = ParamLayout { entries };
    let flat = Tensor::new(vec![total], data).expect("packed length is consistent");
    (layout, flat)
}

fn unpack_on_tape(tape: &mut Tape, packed: ValueId, layout: &ParamLayout) -> Result<BoundParams> {
    let mut ids = BTreeMap::new();
    for (name, shape, offset) in &layout.entries {
        let numel: usize = shape.iter().product();
        let piece = tape.slice(packed, *offset, numel)?;
        let shaped = tape.reshape(piece, shape.clone())?;
        ids.insert(name.clone(), shaped);
    }
    Ok(bound_from_ids(ids))
}

// ---------------------------------------------------------------------------
// Robust comparator for deep graphs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct FdOutcome {
    max_rel_error: f64,
    /// Largest relative error among coordinates at or below
    /// [`RETRY_THRESHOLD`].
    max_rel_clean: f64,
    checked: usize,
    skipped: usize,
    /// Coordinates (with their relative error) above [`RETRY_THRESHOLD`],
    /// candidates for re-differencing on a fresh draw.
    suspects: Vec<(usize, f64)>,
    /// Coordinates the consistency probe refused to compare.
    skipped_coords: Vec<usize>,
}

fn eval_build<F>(build: &F, input: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let id = tape.leaf(input.clone().with_requires_grad(false));
    let out = build(&mut tape, id)?;
    if !tape.tensor(out).is_scalar() {
        return Err(Error::shape(
            "verify",
            format!("objective must be scalar, got {:?}", tape.shape(out)),
        ));
    }
    Ok(tape.scalar_value(out) as f64)
}

fn central_diff<F>(build: &F, probe: &mut Tensor, coord: usize, step: Real) -> Result<f64>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    let original = probe.data()[coord];
    probe.data_mut()[coord] = original + step;
    let plus = eval_build(build, probe)?;
    probe.data_mut()[coord] = original - step;
    let minus = eval_build(build, probe)?;
    probe.data_mut()[coord] = original;
    Ok((plus - minus) / (2.0 * step as f64))
}

/// Central-difference the build at the given coordinates with a
/// two-step consistency probe and a gradient-magnitude floor.
fn fd_check_at<F>(
    build: &F,
    input: &Tensor,
    step: Real,
    coords: &[usize],
    floor: f64,
) -> Result<FdOutcome>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let id = tape.leaf(input.clone().with_requires_grad(true));
    let out = build(&mut tape, id)?;
    if !tape.tensor(out).is_scalar() {
        return Err(Error::shape(
            "verify",
            format!("objective must be scalar, got {:?}", tape.shape(out)),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Real> = tape
        .grad(id)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let mut outcome = FdOutcome::default();
    let mut probe = input.clone();
    for &i in coords {
        let full = central_diff(build, &mut probe, i, step)?;
        let half = central_diff(build, &mut probe, i, step * 0.5)?;
        let a = analytic[i] as f64;
        let scale = a.abs().max(half.abs()).max(floor);
        if (full - half).abs() > CONSISTENCY_TOL * scale {
            outcome.skipped += 1;
            outcome.skipped_coords.push(i);
            continue;
        }
        // Compare against the full-step difference: the half-step probe
        // exists to detect straddles, but carries twice the rounding
        // noise, so it is not used as the estimate itself.
        let rel = (a - full).abs() / a.abs().max(full.abs()).max(floor);
        if rel > outcome.max_rel_error {
            outcome.max_rel_error = rel;
        }
        if rel > RETRY_THRESHOLD {
            outcome.suspects.push((i, rel));
        } else if rel > outcome.max_rel_clean {
            outcome.max_rel_clean = rel;
        }
        outcome.checked += 1;
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Composite sweep
// ---------------------------------------------------------------------------

/// Small but structurally complete backbone for end-to-end differencing:
/// conv → pool → conv → fc with a declared tap, cheap enough that every
/// parameter coordinate can be differenced.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        input_shape: [8, 8, 1],
        layers: vec![
            LayerSpec {
                name: "c1".into(),
                kind: LayerKind::Conv {
                    kernel: 3,
                    out_channels: 2,
                    stride: 1,
                    padding: 0,
                    relu: true,
                },
            },
            LayerSpec {
                name: "p1".into(),
                kind: LayerKind::MaxPool {
                    window: 2,
                    stride: 2,
                },
            },
            LayerSpec {
                name: "c2".into(),
                kind: LayerKind::Conv {
                    kernel: 3,
                    out_channels: 3,
                    stride: 1,
                    padding: 0,
                    relu: true,
                },
            },
            LayerSpec {
                name: "fc_final".into(),
                kind: LayerKind::Fc {
                    width: 4,
                    relu: true,
                },
            },
        ],
        tap_points: vec!["c1".into()],
        final_layer: "fc_final".into(),
    }
}

/// Fusion over the tiny backbone's tap, including the linear reduction
/// so its weights join the checked parameter vector.
pub fn tiny_fusion() -> FusionSpec {
    FusionSpec {
        taps: vec![TapSpec {
            layer: "c1".into(),
            pool: PoolMode::Gap,
        }],
        reduce_to: Some(3),
        normalize_blocks: true,
    }
}

fn composite_params(
    config: &BackboneConfig,
    spec: &FusionSpec,
    head: Option<&ClassifierHead>,
    seed: u64,
) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params =
        build_backbone_with_rng(config, &mut rng).expect("static config builds params");
    init_fusion_params(config, spec, &mut rng, &mut params).expect("static fusion spec is valid");
    if let Some(head) = head {
        head.init_params(&mut rng, &mut params);
    }
    params
}

/// Knobs for one packed-leaf difference check.
struct PackedCheckCfg {
    step: Real,
    /// Kink clearance required of the sampled graph; `0.0` skips
    /// rejection sampling, for graphs with no kinks or with margins
    /// built into the generated values.
    margin: Real,
    /// Rejection-sampling budget when `margin > 0`.
    attempts: usize,
    /// `None` differences every packed coordinate.
    coords_per_tensor: Option<usize>,
}

/// Pack a generated parameter set into one leaf, optionally
/// rejection-sample the draw until the built graph clears the kink
/// margin, then difference the scalar objective coordinate by
/// coordinate.
///
/// Coordinates whose error exceeds [`RETRY_THRESHOLD`], and coordinates
/// the straddle probe refused to compare, are re-differenced on up to
/// [`MAX_EXTRA_DRAWS`] fresh parameter draws: a straddle both defenses
/// miss is a coincidence of one draw, while a genuine backward bug
/// fails every draw. Each such coordinate keeps the smallest error any
/// draw certified; only coordinates no draw could measure stay skipped.
fn check_packed<G, B>(
    report: &mut SweepReport,
    label: &str,
    rng: &mut ChaCha8Rng,
    cfg: PackedCheckCfg,
    mut generate: G,
    build: B,
) -> Result<()>
where
    G: FnMut(usize) -> NetworkParams,
    B: Fn(&mut Tape, &BoundParams) -> Result<ValueId>,
{
    let (layout, first) = pack_params(&generate(0));
    let build_flat = |tape: &mut Tape, id: ValueId| -> Result<ValueId> {
        let bound = unpack_on_tape(tape, id, &layout)?;
        build(tape, &bound)
    };
    let flat = if cfg.margin > 0.0 {
        sample_smooth_input(
            |attempt| pack_params(&generate(attempt)).1,
            &build_flat,
            cfg.margin,
            cfg.attempts,
        )?
    } else {
        first
    };
    let coords: Vec<usize> = match cfg.coords_per_tensor {
        Some(k) => per_tensor_coords(rng, &layout, k),
        None => (0..flat.numel()).collect(),
    };
    let run = fd_check_at(&build_flat, &flat, cfg.step, &coords, GRAD_FLOOR)?;

    let mut max_rel = run.max_rel_clean;
    let mut pending: BTreeMap<usize, Option<f64>> = BTreeMap::new();
    for (i, rel) in &run.suspects {
        pending.insert(*i, Some(*rel));
    }
    for i in &run.skipped_coords {
        pending.insert(*i, None);
    }
    for round in 1..=MAX_EXTRA_DRAWS {
        if pending.is_empty() {
            break;
        }
        // Distinct attempt range per round, so every retry differences
        // an independent draw.
        let redraw = if cfg.margin > 0.0 {
            sample_smooth_input(
                |attempt| pack_params(&generate(round * 500_000 + attempt)).1,
                &build_flat,
                cfg.margin,
                cfg.attempts,
            )?
        } else {
            pack_params(&generate(round * 500_000)).1
        };
        let retry_coords: Vec<usize> = pending.keys().copied().collect();
        let retry = fd_check_at(&build_flat, &redraw, cfg.step, &retry_coords, GRAD_FLOOR)?;
        max_rel = max_rel.max(retry.max_rel_clean);
        let mut next: BTreeMap<usize, Option<f64>> = BTreeMap::new();
        for (i, rel) in &retry.suspects {
            let carried = pending[i].map_or(*rel, |prev| prev.min(*rel));
            next.insert(*i, Some(carried));
        }
        for i in &retry.skipped_coords {
            next.insert(*i, pending[i]);
        }
        pending = next;
    }
    let mut skipped = 0usize;
    for rel in pending.values() {
        match rel {
            Some(r) => max_rel = max_rel.max(*r),
            None => skipped += 1,
        }
    }
    report.absorb(label, max_rel, coords.len() - skipped, skipped);
    Ok(())
}

fn sample_coords<R: Rng>(rng: &mut R, total: usize, count: usize) -> Vec<usize> {
    if count >= total {
        return (0..total).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < count {
        picked.insert(rng.random_range(0..total));
    }
    picked.into_iter().collect()
}

fn per_tensor_coords<R: Rng>(
    rng: &mut R,
    layout: &ParamLayout,
    coords_per_tensor: usize,
) -> Vec<usize> {
    let mut coords = Vec::new();
    for (_, shape, offset) in &layout.entries {
        let numel: usize = shape.iter().product();
        for local in sample_coords(rng, numel, coords_per_tensor) {
            coords.push(offset + local);
        }
    }
    coords
}

fn composite_triplet(report: &mut SweepReport, seed: u64) -> Result<()> {
    let config = tiny_backbone();
    let spec = tiny_fusion();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7121_9);
    let images: Vec<Tensor> = (0..3)
        .map(|_| rand_tensor(&mut rng, vec![8, 8, 1], 0.0, 1.0))
        .collect();
    check_packed(
        report,
        &format!("composite/triplet/seed{seed}"),
        &mut rng,
        PackedCheckCfg {
            step: COMPOSITE_STEP,
            margin: COMPOSITE_KINK_MARGIN,
            attempts: SMOOTH_ATTEMPTS,
            coords_per_tensor: None,
        },
        |attempt| composite_params(&config, &spec, None, seed ^ ((attempt as u64) << 8)),
        |tape, bound| {
            let q = tape.leaf(images[0].clone());
            let p = tape.leaf(images[1].clone());
            let n = tape.leaf(images[2].clone());
            let outs = crate::backbone::triplet_forward(tape, bound, &config, q, p, n)?;
            let fq = fuse(tape, bound, &spec, &outs[0])?;
            let fp = fuse(tape, bound, &spec, &outs[1])?;
            let fneg = fuse(tape, bound, &spec, &outs[2])?;
            triplet_ranking_loss(tape, fq, fp, fneg, DEFAULT_MARGIN)
        },
    )
}

fn composite_classification(report: &mut SweepReport, seed: u64) -> Result<()> {
    let config = tiny_backbone();
    let spec = tiny_fusion();
    let classes = 3;
    let head = ClassifierHead::new(spec.fused_len(&config)?, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_5);
    let image = rand_tensor(&mut rng, vec![8, 8, 1], 0.0, 1.0);
    let label = (seed as usize) % classes;
    check_packed(
        report,
        &format!("composite/classification/seed{seed}"),
        &mut rng,
        PackedCheckCfg {
            step: COMPOSITE_STEP,
            margin: COMPOSITE_KINK_MARGIN,
            attempts: SMOOTH_ATTEMPTS,
            coords_per_tensor: None,
        },
        |attempt| {
            composite_params(&config, &spec, Some(&head), seed ^ ((attempt as u64) << 8))
        },
        |tape, bound| {
            let img = tape.leaf(image.clone());
            let out = crate::backbone::forward_with_taps(tape, bound, &config, img)?;
            let feature = fuse(tape, bound, &spec, &out)?;
            identity_classification_loss(tape, bound, feature, label)
        },
    )
}

/// Difference both end-to-end objectives over every parameter
/// coordinate of the tiny composite, across `seed_count` seeds.
pub fn composite_sweep(seed_count: usize) -> Result<SweepReport> {
    let mut report = SweepReport::empty();
    for seed in 0..seed_count as u64 {
        composite_triplet(&mut report, seed)?;
        composite_classification(&mut report, seed)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Preset geometry sweep
// ---------------------------------------------------------------------------

/// Difference the conv2d op at one configured geometry. The op is
/// linear in input, kernels, and bias separately, so a large step reads
/// straight through the rounding noise; the relu that follows it in the
/// backbone is elementwise and shape-independent, covered by the
/// primitive sweep.
#[allow(clippy::too_many_arguments)]
fn conv_geometry(
    report: &mut SweepReport,
    label: &str,
    rng: &mut ChaCha8Rng,
    in_shape: [usize; 3],
    kernel: usize,
    out_channels: usize,
    stride: usize,
    padding: usize,
) -> Result<()> {
    let [h, w, c] = in_shape;
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let readout = signed_readout_weights(rng, oh * ow * out_channels);
    let base: u64 = rng.random();
    check_packed(
        report,
        label,
        rng,
        PackedCheckCfg {
            step: LINEAR_STEP,
            margin: 0.0,
            attempts: 1,
            coords_per_tensor: Some(GEOM_COORDS),
        },
        |attempt| {
            let mut g = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt as u64));
            let mut p = NetworkParams::new();
            p.insert("input", rand_tensor(&mut g, vec![h, w, c], -1.0, 1.0));
            p.insert(
                "kernels",
                rand_tensor(&mut g, vec![kernel, kernel, c, out_channels], -0.5, 0.5),
            );
            p.insert("bias", rand_tensor(&mut g, vec![out_channels], -0.5, 0.5));
            p
        },
        |tape, bound| {
            let y = tape.conv2d(
                bound.id("input")?,
                bound.id("kernels")?,
                bound.id("bias")?,
                stride,
                padding,
            )?;
            weighted_readout(tape, y, &readout)
        },
    )
}

/// Input for pooling geometry checks: every pooling window holds a
/// shuffled ladder of centered rank values (separation 2, jitter under
/// 0.2), so each within-window margin is at least 1.8 by construction
/// and no reachable difference window can reorder a window. Cells not
/// covered by any window sit below every rank.
fn ranked_pool_input(
    rng: &mut ChaCha8Rng,
    in_shape: [usize; 3],
    window: usize,
    stride: usize,
) -> Tensor {
    let [h, w, c] = in_shape;
    let cells = window * window;
    let half = (cells as Real - 1.0) / 2.0;
    let mut data = vec![-2.0 * half - 2.0; h * w * c];
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut ranks: Vec<usize> = (0..cells).collect();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                ranks.shuffle(rng);
                for dy in 0..window {
                    for dx in 0..window {
                        let rank = ranks[dy * window + dx] as Real;
                        let jitter = rng.random_range(0.0..0.2) as Real;
                        let cell = ((oy * stride + dy) * w + (ox * stride + dx)) * c + ch;
                        data[cell] = 2.0 * (rank - half) + jitter;
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], data).expect("shape/data agree by construction")
}

/// Difference max pooling at one configured geometry on a
/// constructed-margin input. The readout puts signed weight on a couple
/// dozen randomly chosen windows and every input cell of those windows
/// is differenced: pooled maxima all share a sign, and a short signed
/// sum keeps the 32-bit accumulation error far below the secant signal,
/// while the chosen windows still spread over the whole index range.
fn pool_geometry(
    report: &mut SweepReport,
    label: &str,
    rng: &mut ChaCha8Rng,
    in_shape: [usize; 3],
    window: usize,
    stride: usize,
) -> Result<()> {
    if window != stride {
        return Err(Error::config(format!(
            "{label}: geometry check supports non-overlapping pooling only"
        )));
    }
    let [h, w, c] = in_shape;
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let n_out = oh * ow * c;
    let x = ranked_pool_input(rng, in_shape, window, stride);
    let picked = sample_coords(rng, n_out, 24.min(n_out));
    let mut weights = vec![0.0 as Real; n_out];
    for &p in &picked {
        let mag = rng.random_range(0.25..1.75) as Real;
        weights[p] = if rng.random::<bool>() { mag } else { -mag };
    }
    let readout = Tensor::new(vec![n_out], weights)?;
    let mut coords = Vec::with_capacity(picked.len() * window * window);
    for &p in &picked {
        let ch = p % c;
        let ox = (p / c) % ow;
        let oy = p / (c * ow);
        for dy in 0..window {
            for dx in 0..window {
                coords.push(((oy * stride + dy) * w + (ox * stride + dx)) * c + ch);
            }
        }
    }
    let build = |tape: &mut Tape, id: ValueId| -> Result<ValueId> {
        let y = tape.maxpool2d(id, window, stride)?;
        weighted_readout(tape, y, &readout)
    };
    let outcome = fd_check_at(&build, &x, GEOM_KINK_STEP, &coords, GRAD_FLOOR)?;
    report.absorb(label, outcome.max_rel_error, outcome.checked, outcome.skipped);
    Ok(())
}

/// Difference the fully-connected op at one configured geometry. With
/// relu the graph is piecewise linear, so the step is constrained only
/// by kink clearance: weights are drawn wide enough that
/// pre-activations spread to O(2), and a clearance of a few steps then
/// survives rejection sampling over the layer's width.
fn fc_geometry(
    report: &mut SweepReport,
    label: &str,
    rng: &mut ChaCha8Rng,
    in_len: usize,
    width: usize,
    relu: bool,
) -> Result<()> {
    let readout = signed_readout_weights(rng, width);
    let base: u64 = rng.random();
    let spread = (6.0 / (in_len as f64).sqrt()) as Real;
    let activation = if relu {
        Activation::Relu
    } else {
        Activation::Linear
    };
    let cfg = if relu {
        PackedCheckCfg {
            step: GEOM_KINK_STEP,
            margin: GEOM_KINK_MARGIN,
            attempts: 400,
            coords_per_tensor: Some(GEOM_COORDS),
        }
    } else {
        PackedCheckCfg {
            step: LINEAR_STEP,
            margin: 0.0,
            attempts: 1,
            coords_per_tensor: Some(GEOM_COORDS),
        }
    };
    check_packed(
        report,
        label,
        rng,
        cfg,
        |attempt| {
            let mut g = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt as u64));
            let mut p = NetworkParams::new();
            p.insert("input", rand_tensor(&mut g, vec![in_len], -1.0, 1.0));
            p.insert(
                "weights",
                rand_tensor(&mut g, vec![in_len, width], -spread as f64, spread as f64),
            );
            p.insert("bias", rand_tensor(&mut g, vec![width], -0.5, 0.5));
            p
        },
        |tape, bound| {
            let y = tape.fully_connected(
                bound.id("input")?,
                bound.id("weights")?,
                bound.id("bias")?,
                activation,
            )?;
            weighted_readout(tape, y, &readout)
        },
    )
}

/// Difference flattening at one configured geometry (linear, so the
/// large step applies).
fn flatten_geometry(
    report: &mut SweepReport,
    label: &str,
    rng: &mut ChaCha8Rng,
    in_shape: [usize; 3],
) -> Result<()> {
    let [h, w, c] = in_shape;
    let readout = signed_readout_weights(rng, h * w * c);
    let x = rand_tensor(rng, vec![h, w, c], -1.0, 1.0);
    let build = |tape: &mut Tape, id: ValueId| -> Result<ValueId> {
        let y = tape.flatten(id)?;
        weighted_readout(tape, y, &readout)
    };
    let coords = sample_coords(rng, x.numel(), 3 * GEOM_COORDS);
    let outcome = fd_check_at(&build, &x, LINEAR_STEP, &coords, GRAD_FLOOR)?;
    report.absorb(label, outcome.max_rel_error, outcome.checked, outcome.skipped);
    Ok(())
}

/// Difference global average pooling at one configured geometry
/// (linear, so the large step applies).
fn gap_geometry(
    report: &mut SweepReport,
    label: &str,
    rng: &mut ChaCha8Rng,
    in_shape: [usize; 3],
) -> Result<()> {
    let [h, w, c] = in_shape;
    let readout = signed_readout_weights(rng, c);
    let x = rand_tensor(rng, vec![h, w, c], -1.0, 1.0);
    let build = |tape: &mut Tape, id: ValueId| -> Result<ValueId> {
        let y = tape.global_average_pool(id)?;
        weighted_readout(tape, y, &readout)
    };
    let coords = sample_coords(rng, x.numel(), 3 * GEOM_COORDS);
    let outcome = fd_check_at(&build, &x, LINEAR_STEP, &coords, GRAD_FLOOR)?;
    report.absorb(label, outcome.max_rel_error, outcome.checked, outcome.skipped);
    Ok(())
}

/// Difference the fusion graph — per-tap pooling, block normalization,
/// concatenation, and the linear reduction — at the preset's real tap
/// and embedding shapes, with the tap activations and final feature as
/// leaves. Tap values are positive, so block norms sit far above the
/// zero-norm kink.
fn fusion_geometry(
    report: &mut SweepReport,
    name: &str,
    config: &BackboneConfig,
    rng: &mut ChaCha8Rng,
    pool: PoolMode,
    seed: u64,
) -> Result<()> {
    let spec = FusionSpec {
        taps: config
            .tap_points
            .iter()
            .map(|layer| TapSpec {
                layer: layer.clone(),
                pool,
            })
            .collect(),
        reduce_to: Some(64),
        normalize_blocks: true,
    };
    let mut tap_shapes = Vec::new();
    for tap in &spec.taps {
        let FeatureShape::Spatial(h, w, c) = config.shape_of(&tap.layer)? else {
            return Err(Error::config(format!(
                "tap '{}' of preset '{name}' is not spatial",
                tap.layer
            )));
        };
        tap_shapes.push((tap.layer.clone(), vec![h, w, c]));
    }
    let final_len = config.final_len()?;
    let readout = signed_readout_weights(rng, spec.fused_len(config)?);
    let base: u64 = rng.random();
    let tag = match pool {
        PoolMode::Gap => "gap",
        PoolMode::Flatten => "flatten",
    };
    check_packed(
        report,
        &format!("geometry/{name}/fusion-{tag}/seed{seed}"),
        rng,
        PackedCheckCfg {
            step: GEOM_KINK_STEP,
            margin: GEOM_KINK_MARGIN,
            attempts: 20,
            coords_per_tensor: Some(GEOM_COORDS),
        },
        |attempt| {
            let mut g = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt as u64));
            let mut p = NetworkParams::new();
            init_fusion_params(config, &spec, &mut g, &mut p)
                .expect("preset fusion spec is valid");
            for (layer, shape) in &tap_shapes {
                p.insert(
                    format!("verify.tap.{layer}"),
                    rand_tensor(&mut g, shape.clone(), 0.25, 1.0),
                );
            }
            p.insert("verify.final", rand_tensor(&mut g, vec![final_len], 0.25, 1.0));
            p
        },
        |tape, bound| {
            let mut taps = BTreeMap::new();
            for tap in &spec.taps {
                taps.insert(
                    tap.layer.clone(),
                    bound.id(&format!("verify.tap.{}", tap.layer))?,
                );
            }
            let forward = ForwardOutput {
                final_feature: bound.id("verify.final")?,
                taps,
            };
            let fused = fuse(tape, bound, &spec, &forward)?;
            weighted_readout(tape, fused, &readout)
        },
    )
}

/// Difference both objective heads at the preset's fused embedding
/// length: the triplet ranking loss over three embedding leaves whose
/// distances are constructed to keep the hinge active and well clear of
/// its kink, and the classification head over one embedding leaf.
fn objective_geometry(
    report: &mut SweepReport,
    name: &str,
    config: &BackboneConfig,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<()> {
    let spec = FusionSpec {
        taps: config
            .tap_points
            .iter()
            .map(|layer| TapSpec {
                layer: layer.clone(),
                pool: PoolMode::Gap,
            })
            .collect(),
        reduce_to: Some(64),
        normalize_blocks: true,
    };
    let fused = spec.fused_len(config)?;

    let base: u64 = rng.random();
    check_packed(
        report,
        &format!("geometry/{name}/triplet-head/seed{seed}"),
        rng,
        PackedCheckCfg {
            step: SMOOTH_STEP,
            margin: GEOM_KINK_MARGIN,
            attempts: 20,
            coords_per_tensor: Some(2 * GEOM_COORDS),
        },
        |attempt| {
            let mut g = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt as u64));
            let query = rand_tensor(&mut g, vec![fused], -1.0, 1.0);
            // Offsets with fixed norms keep the positive distance near
            // 1.5 and the negative near 0.7, so the hinge pre-activation
            // sits near 1.1: active, and far from every kink.
            let offset = |g: &mut ChaCha8Rng, norm: Real| {
                let d = rand_tensor(g, vec![fused], -1.0, 1.0);
                let scale = norm / (d.data().iter().map(|v| v * v).sum::<Real>()).sqrt();
                let data: Vec<Real> = d
                    .data()
                    .iter()
                    .zip(query.data())
                    .map(|(v, q)| q + v * scale)
                    .collect();
                Tensor::new(vec![fused], data).expect("same length")
            };
            let positive = offset(&mut g, 1.5);
            let negative = offset(&mut g, 0.7);
            let mut p = NetworkParams::new();
            p.insert("verify.positive", positive);
            p.insert("verify.negative", negative);
            p.insert("verify.query", query);
            p
        },
        |tape, bound| {
            triplet_ranking_loss(
                tape,
                bound.id("verify.query")?,
                bound.id("verify.positive")?,
                bound.id("verify.negative")?,
                DEFAULT_MARGIN,
            )
        },
    )?;

    let classes = 32;
    let head = ClassifierHead::new(fused, classes)?;
    let label_class = (seed as usize) % classes;
    let base2: u64 = rng.random();
    check_packed(
        report,
        &format!("geometry/{name}/classification-head/seed{seed}"),
        rng,
        PackedCheckCfg {
            step: SMOOTH_STEP,
            margin: 0.0,
            attempts: 1,
            coords_per_tensor: Some(2 * GEOM_COORDS),
        },
        |attempt| {
            let mut g = ChaCha8Rng::seed_from_u64(base2.wrapping_add(attempt as u64));
            let mut p = NetworkParams::new();
            head.init_params(&mut g, &mut p);
            p.insert("verify.feature", rand_tensor(&mut g, vec![fused], -1.0, 1.0));
            p
        },
        |tape, bound| {
            identity_classification_loss(tape, bound, bound.id("verify.feature")?, label_class)
        },
    )
}

fn preset_geometry(
    report: &mut SweepReport,
    name: &str,
    config: &BackboneConfig,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E03_17);
    let shapes: BTreeMap<String, FeatureShape> =
        config.layer_output_shapes()?.into_iter().collect();
    let mut current = FeatureShape::Spatial(
        config.input_shape[0],
        config.input_shape[1],
        config.input_shape[2],
    );
    for layer in &config.layers {
        let label = format!("geometry/{name}/{}/seed{seed}", layer.name);
        let spatial = |what: &str| match current {
            FeatureShape::Spatial(h, w, c) => Ok([h, w, c]),
            FeatureShape::Vector(_) => Err(Error::config(format!(
                "{what} layer '{}' needs a spatial input",
                layer.name
            ))),
        };
        match &layer.kind {
            LayerKind::Conv {
                kernel,
                out_channels,
                stride,
                padding,
                ..
            } => conv_geometry(
                report,
                &label,
                &mut rng,
                spatial("conv")?,
                *kernel,
                *out_channels,
                *stride,
                *padding,
            )?,
            LayerKind::MaxPool { window, stride } => {
                pool_geometry(report, &label, &mut rng, spatial("maxpool")?, *window, *stride)?
            }
            LayerKind::Fc { width, relu } => {
                fc_geometry(report, &label, &mut rng, current.numel(), *width, *relu)?
            }
            LayerKind::GlobalAveragePool => {
                gap_geometry(report, &label, &mut rng, spatial("gap")?)?
            }
            LayerKind::Flatten => {
                flatten_geometry(report, &label, &mut rng, spatial("flatten")?)?
            }
        }
        current = *shapes
            .get(&layer.name)
            .expect("layer_output_shapes covers every layer");
    }
    for pool in [PoolMode::Gap, PoolMode::Flatten] {
        fusion_geometry(report, name, config, &mut rng, pool, seed)?;
    }
    objective_geometry(report, name, config, &mut rng, seed)
}

/// Check every layer of every shipped preset at its exact configured
/// geometry, then the fusion graph and both objective heads at the
/// preset's tap and embedding sizes. Layer inputs are synthetic leaves,
/// so each check isolates one op's index arithmetic at real shapes; the
/// full composition is certified separately by [`composite_sweep`].
pub fn preset_geometry_sweep(seed_count: usize) -> Result<SweepReport> {
    let mut report = SweepReport::empty();
    for seed in 0..seed_count as u64 {
        for name in PRESET_NAMES {
            let config =
                preset(name).ok_or_else(|| Error::config(format!("unknown preset '{name}'")))?;
            preset_geometry(&mut report, name, &config, seed)?;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub primitives: SweepReport,
    pub composites: SweepReport,
    pub preset_geometry: SweepReport,
    pub max_rel_error: f64,
    pub seeds: usize,
    pub elapsed_seconds: f64,
}

/// Run all three sweeps. `seed_count` governs the primitive and
/// composite sweeps; the geometry sweep runs a handful of seeds, since
/// its checks repeat identical structure and its errors are dominated
/// by deterministic rounding rather than the draw.
pub fn run_full_verification(seed_count: usize) -> Result<VerificationReport> {
    let start = Instant::now();
    let primitives = primitive_sweep(seed_count)?;
    let composites = composite_sweep(seed_count)?;
    let preset_geometry = preset_geometry_sweep(seed_count.clamp(1, 4))?;
    let max_rel_error = primitives
        .max_rel_error
        .max(composites.max_rel_error)
        .max(preset_geometry.max_rel_error);
    Ok(VerificationReport {
        primitives,
        composites,
        preset_geometry,
        max_rel_error,
        seeds: seed_count,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}
