use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::{Mat, NumError};

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` with central finite
/// differences for every entry of every input. Returns the largest
/// relative error.
pub fn grad_check<F>(f: F, inputs: &[Mat], eps: f64) -> Result<f64, NumError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    let eval = |xs: &[Mat]| -> Result<f64, NumError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).cloned().unwrap_or_else(|| Mat::zeros(inputs[k].rows, inputs[k].cols));
        for i in 0..inputs[k].len() {
            let orig = xs[k].data[i];
            xs[k].data[i] = orig + eps;
            let up = eval(&xs)?;
            xs[k].data[i] = orig - eps;
            let down = eval(&xs)?;
            xs[k].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data[i], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check of `f` with respect to stored parameters
/// (`ids`, or every trainable parameter when `None`).
pub fn param_grad_check<F>(store: &mut ParamStore, ids: Option<&[ParamId]>, f: F, eps: f64) -> Result<f64, NumError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let grads: HashMap<ParamId, Mat> = g.param_grads().into_iter().collect();
    let ids: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().filter(|&id| store.trainable(id)).collect(),
    };
    let eval = |s: &ParamStore| -> Result<f64, NumError> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.get(id).len();
        for i in 0..n {
            let analytic = grads.get(&id).map_or(0.0, |m| m.data[i]);
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + eps;
            let up = eval(store)?;
            store.get_mut(id).data[i] = orig - eps;
            let down = eval(store)?;
            store.get_mut(id).data[i] = orig;
            worst = worst.max(relative_error(analytic, (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
