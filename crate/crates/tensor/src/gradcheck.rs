//! Finite-difference verification of recorded gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (near) zero are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Compares the tape's analytic gradients of a scalar function against
/// central differences `(f(x + eps) - f(x - eps)) / (2 eps)` for every
/// coordinate of every input, returning the largest relative error.
///
/// `f` receives a fresh tape and one leaf per input and must return a
/// scalar node. It must be deterministic.
pub fn grad_check<G>(f: G, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(TensorError::Argument(format!("eps {eps} must be positive")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
