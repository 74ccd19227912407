use super::{Tape, Tensor, Var};
use crate::error::{contract_err, Result};

/// Gradient magnitudes below this are compared in absolute terms, since a
/// central difference cannot resolve them relative to its own round-off.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return contract_err(format!("gradient check needs a scalar function, got shape {:?}", value.shape()));
    }
    value.item()
}

/// Compares reverse-mode gradients of the scalar program `f` at `x` with
/// central finite differences of step `h`, returning the worst relative
/// error over all coordinates.
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// [`check_gradients`] over several inputs at once (e.g. every parameter of
/// a network).
pub fn check_gradients_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return contract_err(format!("finite-difference step {h} outside [1e-6, 1e-4]"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let original = input.data()[j];
            probe[i].data_mut()[j] = original + h;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = original - h;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}
