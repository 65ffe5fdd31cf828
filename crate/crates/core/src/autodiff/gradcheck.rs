//! Central finite-difference gradient checks in double precision.
//!
//! The function under test is rebuilt on a pinned tape for every probe, so
//! stop-gradient and straight-through nodes keep their recorded values and
//! the numerical derivative is that of the surrogate `backward` actually
//! differentiates.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst relative error per input, `max |analytic − numeric| / max(|analytic|, |numeric|)`
/// with both maxima taken over the input's elements.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub rel_errors: Vec<f64>,
    pub evaluations: usize,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Gradient scale below which a tensor's gradient is compared absolutely.
pub const ABS_FLOOR: f64 = 1e-9;

/// Compares `backward` against `(f(x+h) − f(x−h)) / 2h` for every element of
/// every input. `build` receives one grad-requiring leaf per input, in order,
/// and must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let pins = tape.pins();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::pinned(pins.clone());
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut evaluations = 0;
    for (i, a) in analytic.iter().enumerate() {
        let mut worst_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (j, &aj) in a.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            evaluations += 2;
            let numeric = (plus - minus) / (2.0 * step);
            worst_diff = worst_diff.max((aj - numeric).abs());
            scale = scale.max(aj.abs()).max(numeric.abs());
        }
        rel_errors.push(worst_diff / scale.max(ABS_FLOOR));
    }
    Ok(GradCheck { rel_errors, evaluations })
}
