//! Central-difference gradient checking.

use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::{Tape, Tensor};

/// Floor in the relative-error denominator so near-zero gradients compare
/// against a fixed scale instead of dividing by noise.
const REL_FLOOR: f64 = 1e-2;

/// Compares the tape gradient of `f` at `x` against central differences
/// (f(x+εeᵢ) − f(x−εeᵢ)) / 2ε and returns the max relative error
/// |fd − an| / max(|fd|, |an|, floor) over all coordinates.
///
/// `f` must build a scalar from its tensor argument on the given tape and be
/// deterministic; it is called once recording and 2·numel times for probes.
pub fn finite_difference_check<F>(f: &F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    finite_difference_check_masked(f, x, eps, &|_| true)
}

/// finite_difference_check restricted to coordinates where `check_coord` is
/// true. Callers exclude coordinates sitting on subgradient kinks.
pub fn finite_difference_check_masked<F>(
    f: &F,
    x: &Tensor,
    eps: f32,
    check_coord: &dyn Fn(usize) -> bool,
) -> Result<f32>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("eps", "must be positive"));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x.shape(), x.data().to_vec(), true)?;
    let loss = f(&tape, &leaf)?;
    if !loss.shape().is_empty() {
        return Err(Error::shape(
            "finite_difference_check",
            "f must return a scalar".into(),
        ));
    }
    tape.backward(&loss)?;
    let analytic = tape.grad(&leaf)?.data().to_vec();

    let probe = |data: Vec<f32>| -> Result<f64> {
        let t = Tape::inference();
        let leaf = t.leaf(x.shape(), data, false)?;
        let out = f(&t, &leaf)?;
        Ok(out.scalar()? as f64)
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        if !check_coord(i) {
            continue;
        }
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fd = (probe(plus)? - probe(minus)?) / (2.0 * eps as f64);
        let an = analytic[i] as f64;
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(REL_FLOOR);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel as f32)
}

/// Resamples `data` in place until no coordinate sits within `margin` of a
/// relu kink at 0, drawing from uniform(lo, hi).
pub fn resample_away_from_zero(
    rng: &mut crate::rng::Rng,
    data: &mut [f32],
    lo: f32,
    hi: f32,
    margin: f32,
) {
    for v in data.iter_mut() {
        *v = rng.uniform(lo, hi);
        while v.abs() < margin {
            *v = rng.uniform(lo, hi);
        }
    }
}
