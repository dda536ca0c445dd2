//! Central-difference verification of tape gradients.

use rayon::prelude::*;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Worst coordinate of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[(String, Tensor<f64>)]) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(name, t)| tape.param(name.clone(), t.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compares [`Tape::backward`] against `(f(p+h) − f(p−h)) / 2h` for every
/// coordinate of every parameter.
///
/// `f` builds a scalar on the tape from the registered parameter handles
/// (in the order of `params`). It must be deterministic.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    let (tape, vars, out) = evaluate(&f, params)?;
    let base = tape.value(out).item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("function value {base} at the base point")));
    }
    let grads = tape.backward(out)?;

    let scalar_at = |pi: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut shifted = params.to_vec();
        let t = &mut shifted[pi].1;
        t.data_mut()[idx] += delta;
        let (tape, _, out) = evaluate(&f, &shifted)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value {v} at {}[{idx}] shifted by {delta:e}",
                params[pi].0
            )));
        }
        Ok(v)
    };

    let mut entries = Vec::with_capacity(params.len());
    for (pi, ((name, value), &var)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(var);
        let numeric: Vec<f64> = (0..value.len())
            .into_par_iter()
            .map(|idx| {
                let up = scalar_at(pi, idx, step)?;
                let down = scalar_at(pi, idx, -step)?;
                Ok((up - down) / (2.0 * step))
            })
            .collect::<Result<_>>()?;
        let mut entry = GradCheckEntry {
            name: name.clone(),
            coords: value.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (idx, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
            let e = relative_error(a, n);
            if e > entry.max_rel_err || idx == 0 {
                entry.max_rel_err = e;
                entry.worst_index = idx;
                entry.analytic = a;
                entry.numeric = n;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries })
}
