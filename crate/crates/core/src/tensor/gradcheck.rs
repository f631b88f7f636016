use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Analytic gradients of scalar `f` at `inputs`, one tensor per input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.value().is_scalar() {
        return Err(Error::Usage("gradcheck needs a scalar function".into()));
    }
    if !out.is_tracked() {
        // Output does not depend on any input.
        return Ok(inputs.iter().map(|t| Tensor::zeros(t.shape())).collect());
    }
    let grads = tape.backward(&out)?;
    Ok(vars.iter().map(|v| grads.get_or_zeros(v)).collect())
}

/// Central-difference gradients of scalar `f` with step `epsilon`.
pub fn numeric_grads<F>(f: &F, inputs: &[Tensor], epsilon: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = vals.iter().cloned().map(Var::constant).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let mut out = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut g = vec![0.0; input.numel()];
        for (j, slot) in g.iter_mut().enumerate() {
            let mut shifted = inputs.to_vec();
            let mut data = input.to_vec();
            data[j] = input.data()[j] + epsilon;
            shifted[i] = Tensor::from_parts(input.shape().to_vec(), data.clone());
            let plus = eval(&shifted)?;
            data[j] = input.data()[j] - epsilon;
            shifted[i] = Tensor::from_parts(input.shape().to_vec(), data);
            let minus = eval(&shifted)?;
            *slot = (plus - minus) / (2.0 * epsilon);
        }
        out.push(Tensor::from_parts(input.shape().to_vec(), g));
    }
    Ok(out)
}

/// `max |a − n| / max(1e-8, |a| + |n|)` over all scalars.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    max_relative_error_with_floor(analytic, numeric, 1e-8)
}

/// As [`max_relative_error`] with a caller-chosen denominator floor, for
/// losses whose round-off swamps gradients smaller than the floor.
pub fn max_relative_error_with_floor(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares tape gradients of `f` against central finite differences and
/// returns the maximum relative error.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Usage(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = analytic_grads(&f, inputs)?;
    let numeric = numeric_grads(&f, inputs, epsilon)?;
    Ok(max_relative_error(&analytic, &numeric))
}
