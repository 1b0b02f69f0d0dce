//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, ParamId, ParamSet, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the backward pass of `loss` against central differences with
/// step `h` on every entry of every parameter.
pub fn check_gradients<F>(params: &mut ParamSet<f64>, loss: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new(p);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in ids {
        for i in 0..params.value(id).len() {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.param(id).map_or(0.0, |g| g.values[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
