//! Finite-difference checks of reverse-mode gradients.
//!
//! The reported error for a coordinate is `|analytic - numeric| / max(|analytic|,
//! |numeric|, 1e-3)`; the floor keeps vanishing components from turning
//! roundoff into huge ratios.

use super::graph::{Graph, Mode, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const FLOOR: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::State(
            "grad_check: function is not scalar-valued".into(),
        ));
    }
    Ok(t.item())
}

/// Max relative error between the reverse-mode gradient of `f` at `x` and
/// central differences with the given step.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Train);
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::inference(Mode::Train);
        let v = g.input(t);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check against the parameters `ids` of `store`. `f` builds the loss
/// from the store's current values.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut f: F,
    step: f64,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &mut ParamStore) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Train);
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = grads
            .param(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(*id).shape()));
        for i in 0..analytic.numel() {
            let orig = store.value(*id).data()[i];
            let mut eval_at = |val: f64, store: &mut ParamStore| -> Result<f64> {
                store.value_mut(*id).data_mut()[i] = val;
                let mut g = Graph::inference(Mode::Train);
                let out = f(&mut g, store)?;
                scalar_of(&g, out)
            };
            let fp = eval_at(orig + step, store)?;
            let fm = eval_at(orig - step, store)?;
            store.value_mut(*id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
