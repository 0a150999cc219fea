//! Central-difference gradient verification.
//!
//! The numeric side rebuilds the graph from scratch at every probe point, so
//! it shares nothing with the reverse-mode path it is checking.

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Floor for the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Compare reverse-mode gradients of a scalar-valued graph against central
/// finite differences, one coordinate at a time, over every input tensor.
/// Returns the worst relative error, with denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check_multi<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::dimension(
            "grad_check",
            format!("function output must be scalar, got {:?}", tape.value(root).shape()),
        ));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = points.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let r = build(&mut t, &vs)?;
        let y = t.value(r).item()?;
        if !y.is_finite() {
            return Err(Error::numeric("grad_check", "non-finite function value"));
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    let mut points: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            let orig = input.data()[coord];
            points[which].data_mut()[coord] = orig + eps;
            let f_plus = eval(&points)?;
            points[which].data_mut()[coord] = orig - eps;
            let f_minus = eval(&points)?;
            points[which].data_mut()[coord] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[which][coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper.
pub fn grad_check<F>(build: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| build(tape, vars[0]), std::slice::from_ref(x), eps)
}
