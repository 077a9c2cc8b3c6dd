use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central
/// differences at every entry of every input.
///
/// Returns `max |analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f32) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    finite_diff_check_entries(f, inputs, eps, &entries)
}

/// Same as [`finite_diff_check`] restricted to `(input, element)` pairs.
pub fn finite_diff_check_entries<F>(
    f: F,
    inputs: &[Tensor],
    eps: f32,
    entries: &[(usize, usize)],
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(&loss)?;
        vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.numel() != 1 {
            return Err(Error::Contract("finite_diff_check needs a scalar function".into()));
        }
        Ok(out.value().item() as f64)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, e) in entries {
        let orig = inputs[i].data()[e];
        work[i].data_mut()[e] = orig + eps;
        let plus = eval(&work)?;
        work[i].data_mut()[e] = orig - eps;
        let minus = eval(&work)?;
        work[i].data_mut()[e] = orig;
        // step actually realized in f32
        let h = ((orig + eps) as f64) - ((orig - eps) as f64);
        let numeric = (plus - minus) / h;
        let exact = analytic[i].data()[e] as f64;
        worst = worst.max((exact - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
