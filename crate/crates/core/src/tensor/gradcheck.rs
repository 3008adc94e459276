//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent oracle for the analytic backward rules.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / (‖analytic‖₂ + ‖numeric‖₂)` per input.
    pub rel_err: Vec<f64>,
    pub max_abs_err: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut max_abs_err: f64 = 0.0;
    for (ti, an) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..inputs[ti].len() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * h);
            let d = an[j] - num;
            max_abs_err = max_abs_err.max(d.abs());
            diff2 += d * d;
            a2 += an[j] * an[j];
            n2 += num * num;
        }
        let denom = a2.sqrt() + n2.sqrt();
        // Inputs with (near) zero gradient fall back to the absolute error.
        rel_err.push(if denom < 1e-8 { diff2.sqrt() } else { diff2.sqrt() / denom });
    }
    Ok(GradCheck {
        rel_err,
        max_abs_err,
    })
}
