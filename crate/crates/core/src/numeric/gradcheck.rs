use super::{Matrix, Tape, Var};
use crate::error::Result;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Largest error within each parameter, in parameter order.
    pub per_param: Vec<f64>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn compare(analytic: &[Matrix], numeric: &[Matrix]) -> Self {
        let per_param: Vec<f64> = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| {
                a.values()
                    .iter()
                    .zip(n.values())
                    .map(|(&a, &n)| relative_error(a, n))
                    .fold(0.0, f64::max)
            })
            .collect();
        GradCheckReport {
            max_relative_error: per_param.iter().copied().fold(0.0, f64::max),
            coordinates: analytic.iter().map(Matrix::len).sum(),
            per_param,
        }
    }
}

fn evaluate<F>(params: &[Matrix], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Gradients from the tape, one matrix per parameter.
pub fn analytic_gradient<F>(params: &[Matrix], f: &F) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok((0..params.len())
        .map(|i| grads.get(i).cloned().expect("registered parameter"))
        .collect())
}

/// Central differences `(f(p + h) - f(p - h)) / 2h` for every coordinate.
pub fn numeric_gradient<F>(params: &[Matrix], f: &F, h: f64) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Matrix::zeros(params[p].rows(), params[p].cols());
        for k in 0..params[p].len() {
            let orig = work[p].values()[k];
            work[p].values_mut()[k] = orig + h;
            let plus = evaluate(&work, f)?;
            work[p].values_mut()[k] = orig - h;
            let minus = evaluate(&work, f)?;
            work[p].values_mut()[k] = orig;
            grad.values_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares tape gradients of the scalar `f` against central differences.
pub fn grad_check<F>(params: &[Matrix], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(params, &f)?;
    let numeric = numeric_gradient(params, &f, h)?;
    Ok(GradCheckReport::compare(&analytic, &numeric))
}
