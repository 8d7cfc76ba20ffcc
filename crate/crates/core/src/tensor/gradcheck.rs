//! Central finite-difference gradient checking.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-3)`; the floor
//! keeps coordinates with near-zero true gradient from dominating through
//! rounding noise.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const RELATIVE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(params: &[Tensor], f: &F, track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.set_requires_grad(track);
            tape.leaf(p)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Usage("gradient check needs a scalar function".into()));
    }
    Ok((tape, vars, loss))
}

/// Gradients of `f` with respect to every tensor in `params`, via the tape.
pub fn analytic_gradients<F>(params: &[Tensor], f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = evaluate(params, &f, true)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect())
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h`, one coordinate at a time.
pub fn numeric_gradients<F>(params: &[Tensor], h: f64, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Vec::with_capacity(params[t].len());
        for i in 0..params[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let (tape, _, loss) = evaluate(&work, &f, false)?;
            let plus = tape.value(loss).item();
            work[t].data_mut()[i] = orig - h;
            let (tape, _, loss) = evaluate(&work, &f, false)?;
            let minus = tape.value(loss).item();
            work[t].data_mut()[i] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.iter().zip(n).map(|(x, y)| relative_error(*x, *y)))
        .fold(0.0, f64::max)
}

/// Worst relative error between autodiff and central-difference gradients of
/// the scalar function `f` over all coordinates of `params`.
pub fn finite_diff_check<F>(params: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &f)?;
    let numeric = numeric_gradients(params, h, &f)?;
    Ok(max_relative_error(&analytic, &numeric))
}
