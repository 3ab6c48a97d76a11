//! Central-difference verification of tape gradients.

use super::{Real, Tape, Tensor, ValueId};
use crate::error::{Error, Result};

/// Minimum distance from a kink (relu zero crossing, pooling argmax
/// switch, zero Euclidean distance, zero norm) below which a forward pass
/// is rejected for finite-difference checking: a difference window that
/// straddles a kink compares the analytic gradient against the wrong
/// secant.
pub const KINK_MARGIN: Real = 1e-2;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat input coordinate where the worst error occurred.
    pub worst_coord: usize,
    pub coords_checked: usize,
}

fn eval_scalar<F>(build: &F, input: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let id = tape.leaf(input.clone().with_requires_grad(false));
    let out = build(&mut tape, id)?;
    if !tape.tensor(out).is_scalar() {
        return Err(Error::shape(
            "gradient_check",
            format!("objective must be scalar, got {:?}", tape.shape(out)),
        ));
    }
    Ok(tape.scalar_value(out) as f64)
}

/// Compare the tape gradient of `build(input)` against central
/// differences over every input coordinate.
pub fn gradient_check<F>(build: F, input: &Tensor, step: Real) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    let coords: Vec<usize> = (0..input.numel()).collect();
    gradient_check_at(build, input, step, &coords)
}

/// Like [`gradient_check`] but only over the given flat coordinates;
/// used to subsample large parameter vectors.
pub fn gradient_check_at<F>(
    build: F,
    input: &Tensor,
    step: Real,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let id = tape.leaf(input.clone().with_requires_grad(true));
    let out = build(&mut tape, id)?;
    if !tape.tensor(out).is_scalar() {
        return Err(Error::shape(
            "gradient_check",
            format!("objective must be scalar, got {:?}", tape.shape(out)),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Real> = tape
        .grad(id)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        coords_checked: coords.len(),
    };
    let mut probe = input.clone();
    for &i in coords {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let plus = eval_scalar(&build, &probe)?;
        probe.data_mut()[i] = original - step;
        let minus = eval_scalar(&build, &probe)?;
        probe.data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * step as f64);
        let a = analytic[i] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = i;
        }
    }
    Ok(report)
}

/// Draw candidate inputs until the recorded forward pass stays at least
/// `margin` away from every kink, so finite differencing is valid at the
/// returned point. `generate` receives the attempt number.
pub fn sample_smooth_input<F, G>(
    mut generate: G,
    build: F,
    margin: Real,
    max_attempts: usize,
) -> Result<Tensor>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
    G: FnMut(usize) -> Tensor,
{
    for attempt in 0..max_attempts {
        let candidate = generate(attempt);
        let mut tape = Tape::new();
        let id = tape.leaf(candidate.clone());
        build(&mut tape, id)?;
        match tape.min_kink_margin() {
            Some(m) if m < margin => continue,
            _ => return Ok(candidate),
        }
    }
    Err(Error::numeric(format!(
        "no input cleared the kink margin {margin} in {max_attempts} attempts"
    )))
}
