use super::{Result, Tape, Tensor};

/// Worst relative disagreement between the taped gradient of a scalar-valued
/// function and a central finite difference at the same point.
///
/// Relative error per coordinate is `|a - n| / max(1, |a|, |n|)`; any
/// non-finite value maps to infinity so it can never pass a threshold.
pub fn grad_check<F>(f: F, shape: &[usize], x0: &[f64]) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    grad_check_multi(
        |tape, xs| f(tape, &xs[0]),
        &[(shape.to_vec(), x0.to_vec())],
    )
}

/// [`grad_check`] over several independent inputs at once; returns the max
/// relative error across every coordinate of every input.
pub fn grad_check_multi<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)]) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    // Analytic pass.
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, vals)| Tensor::param(shape.clone(), vals.clone()))
        .collect::<Result<_>>()?;
    let y = f(&tape, &leaves)?;
    tape.backward(&y)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad_or_zeros()).collect();

    // Frozen-input evaluation used by the difference quotient.
    let eval = |points: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let xs: Vec<Tensor> = inputs
            .iter()
            .zip(points)
            .map(|((shape, _), vals)| Tensor::new(shape.clone(), vals.clone()))
            .collect::<Result<_>>()?;
        Ok(f(&tape, &xs)?.item())
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, vals)| vals.clone()).collect();
    let mut worst = 0.0f64;
    for (which, (_, vals)) in inputs.iter().enumerate() {
        for i in 0..vals.len() {
            let h = 1e-6 * vals[i].abs().max(1.0);
            let mut plus = base.clone();
            plus[which][i] += h;
            let mut minus = base.clone();
            minus[which][i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[which][i];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            let rel = ((a - numeric) / denom).abs();
            worst = worst.max(if rel.is_finite() { rel } else { f64::INFINITY });
        }
    }
    Ok(worst)
}
