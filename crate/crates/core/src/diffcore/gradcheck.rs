//! Central finite-difference oracle for tape gradients.

use super::params::{Graph, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("{what} evaluated to {x}")))
    }
}

/// Largest relative error between the tape gradient of `f` and a central
/// difference with step `h`, over every coordinate of `params`.
///
/// Relative error is `|a − b| / max(1, |a|, |b|)`, so coordinates with
/// vanishing gradients are compared absolutely.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        finite(tape.scalar(out), "objective")
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    finite(tape.scalar(out), "objective")?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for k in 0..params[pi].len() {
            let x0 = params[pi].data()[k];
            probe[pi].data_mut()[k] = x0 + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[k] = x0 - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(finite(analytic.data()[k], "gradient")?, numeric));
        }
    }
    Ok(worst)
}

/// Same check for a function of every parameter in `store`. At most
/// `max_coords` evenly spaced coordinates are probed (all when `None`).
pub fn finite_diff_check_store<F>(store: &ParamStore, f: F, h: f64, max_coords: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_diff_check_params(store, &ids, f, h, max_coords)
}

/// As [`finite_diff_check_store`], probing only the parameters in `ids`.
/// Used for objectives whose stop-gradients make the tape gradient differ
/// from the total derivative on the remaining parameters.
pub fn finite_diff_check_params<F>(store: &ParamStore, ids: &[ParamId], f: F, h: f64, max_coords: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::trainable(store);
    let out = f(&mut g)?;
    finite(g.scalar(out), "objective")?;
    let grads = g.param_grads(out)?;
    drop(g);

    let coords: Vec<(usize, usize)> = ids
        .iter()
        .map(|id| id.index())
        .flat_map(|i| (0..store.tensors()[i].len()).map(move |k| (i, k)))
        .collect();
    let stride = match max_coords {
        Some(m) if m > 0 && coords.len() > m => coords.len().div_ceil(m),
        _ => 1,
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::frozen(s);
        let out = f(&mut g)?;
        finite(g.scalar(out), "objective")
    };

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &(i, k) in coords.iter().step_by(stride) {
        let x0 = store.tensors()[i].data()[k];
        probe.tensors_mut()[i].data_mut()[k] = x0 + h;
        let up = eval(&probe)?;
        probe.tensors_mut()[i].data_mut()[k] = x0 - h;
        let down = eval(&probe)?;
        probe.tensors_mut()[i].data_mut()[k] = x0;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(finite(grads[i].data()[k], "gradient")?, numeric));
    }
    Ok(worst)
}
