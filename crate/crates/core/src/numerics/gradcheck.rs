//! Central finite-difference gradient verification.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Real;
use crate::error::{invalid, Error, Result};

/// Denominator floor for the relative error, so entries whose analytic and
/// numeric gradients are both ~0 compare on an absolute scale of 1e-6.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Maximum over every entry of `params` of
/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`,
/// where `numeric = (f(w+h) − f(w−h)) / 2h`.
///
/// `f` must build a scalar loss deterministically from the store.
pub fn grad_check<T, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    h: f64,
    mut f: F,
) -> Result<f64>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid!("finite-difference step must be positive, got {h}"));
    }
    store.zero_grad();
    let mut tape = Graph::new();
    let loss = f(&mut tape, store)?;
    check_scalar(&tape, loss)?;
    tape.backward(loss, store)?;
    drop(tape);

    let step = T::lit(h);
    let mut worst = 0.0f64;
    for &id in params {
        let analytic: Vec<f64> = match &store.get(id).grad {
            Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; store.value(id).numel()],
        };
        for (i, &a) in analytic.iter().enumerate() {
            let original = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = original + step;
            let plus = evaluate(store, &mut f)?;
            store.get_mut(id).value.data_mut()[i] = original - step;
            let minus = evaluate(store, &mut f)?;
            store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn evaluate<T, F>(store: &ParamStore<T>, f: &mut F) -> Result<f64>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    check_scalar(&g, loss)
}

fn check_scalar<T: Real>(g: &Graph<T>, loss: Var) -> Result<f64> {
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(invalid!("grad_check function must return a scalar"));
    }
    let x = v.data()[0].as_f64();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {x}")));
    }
    Ok(x)
}
