//! Central finite-difference gradient verification.
//!
//! Independent of the tape's backward rules by construction: the forward
//! closure is re-evaluated at perturbed parameter values, so only forward
//! arithmetic is trusted.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Build a loss from `params` on a fresh tape via `forward`, then compare
/// analytic gradients against central differences with step `h`.
/// Returns the maximum relative error over all parameter entries, where
/// relative error is |analytic − fd| / max(1, |analytic|, |fd|).
pub fn finite_difference_check<F>(
    params: &[(String, Tensor)],
    h: f64,
    forward: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = forward(&mut tape, &vars)?;
        Ok(tape.value(loss).data[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let loss = forward(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()))
        .collect::<Result<_>>()?;

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut max_rel: f64 = 0.0;
    for (pi, (_, tensor)) in params.iter().enumerate() {
        for ei in 0..tensor.len() {
            let mut plus = base.clone();
            plus[pi].data[ei] += h;
            let mut minus = base.clone();
            minus[pi].data[ei] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
