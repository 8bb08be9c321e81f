//! Central finite-difference checks for tape gradients.
//!
//! The numerical side only evaluates the forward function; it never looks
//! at the recorded backward rules.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Worst agreement found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-input relative error.
    pub max_relative_error: f64,
    /// Per-input relative errors, in input order.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Central-difference estimate of `d f / d inputs`.
pub fn numerical_gradients<F>(inputs: &[Tensor], f: &F, h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        grads.push(Tensor::from_parts(inputs[k].shape().to_vec(), g));
    }
    Ok(grads)
}

/// Compares tape gradients of the scalar `f` with central differences.
///
/// Relative error per input is `‖auto − numeric‖ / max(‖auto‖, ‖numeric‖, floor)`
/// with `floor = 1e-6 · max(1, |f|)`. Central differences carry round-off of
/// roughly `ε·|f| / h`, which the floor keeps from dominating inputs whose
/// true gradient is zero.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let floor = 1e-6 * tape.value(out).item().abs().max(1.0);
    let grads = tape.backward(out)?;
    let numeric = numerical_gradients(inputs, &f, h)?;

    let norm = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let relative_errors: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .zip(&numeric)
        .map(|((&v, input), num)| {
            let auto = grads.get_or_zeros(v, input);
            let diff: Vec<f64> = auto
                .data()
                .iter()
                .zip(num.data())
                .map(|(a, n)| a - n)
                .collect();
            norm(&diff) / norm(auto.data()).max(norm(num.data())).max(floor)
        })
        .collect();
    Ok(GradCheckReport {
        max_relative_error: relative_errors.iter().cloned().fold(0.0, f64::max),
        relative_errors,
    })
}
