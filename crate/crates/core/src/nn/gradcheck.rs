//! Central finite-difference check of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares the gradient of the scalar built by `f` against central
/// differences for every scalar of every parameter in `store`.
///
/// Returns the maximum over all scalars of
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
/// Gradients below the floor are compared absolutely: a true zero (say an
/// attention key bias, which softmax ignores) otherwise scores 1 from
/// finite-difference roundoff alone.
pub fn grad_check<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    assert!(eps > 0.0, "grad_check needs a positive step");
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        store
            .ids()
            .map(|id| match grads.param(id) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; store.value(id).len()],
            })
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            store.get_mut(id).tensor.data_mut()[j] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[j] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
