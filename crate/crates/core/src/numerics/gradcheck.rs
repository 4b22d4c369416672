use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamSet};
use super::prng::Prng;
use crate::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares tape gradients of the scalar `f` against central differences
/// with step `h` on up to `per_tensor` seeded entries of every tensor in
/// `params` (all entries when the tensor is smaller).
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; `floor` keeps entries
/// whose true gradient is zero from dividing noise by noise.
pub fn grad_check<F>(params: &ParamSet, f: F, h: f64, per_tensor: usize, floor: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(String::from("loss at the unperturbed parameters")));
        }
        g.backward(loss)
    };
    let mut prng = Prng::new(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            prng.sample_distinct(n, per_tensor)
        };
        for i in picks {
            let orig = params.get(id).data()[i];
            let mut eval = |delta: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = orig + delta;
                let mut g = Graph::new(&work);
                let loss = f(&mut g)?;
                let v = g.scalar(loss);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("loss at {}[{i}] {:+e}", params.name(id), delta)));
                }
                Ok(v)
            };
            let plus = eval(h)?;
            let minus = eval(-h)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = rel.max(report.max_rel_err);
                if rel >= report.max_rel_err {
                    report.worst = format!("{}[{i}]", params.name(id));
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
