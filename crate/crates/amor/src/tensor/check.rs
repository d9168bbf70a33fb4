//! Finite-difference gradient checking.

use super::{Tape, TensorId};
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences, returning the maximum relative error over every
/// input element.
///
/// `build` receives a fresh tape plus leaf ids for `inputs` (in order) and
/// returns the scalar output node. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(build: F, inputs: &[(Vec<f64>, Vec<usize>)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = data
            .iter()
            .zip(inputs)
            .map(|(d, (_, shape))| tape.leaf(d.clone(), shape.clone(), true))
            .collect();
        let out = build(&mut tape, &ids)?;
        Ok(tape.value(out))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(d, shape)| tape.leaf(d.clone(), shape.clone(), true))
        .collect();
    let out = build(&mut tape, &ids)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, (d, _))| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();

    let base: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let mut max_rel = 0.0f64;
    for p in 0..inputs.len() {
        for e in 0..base[p].len() {
            let mut plus = base.clone();
            plus[p][e] += FD_STEP;
            let mut minus = base.clone();
            minus[p][e] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let a = analytic[p][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
