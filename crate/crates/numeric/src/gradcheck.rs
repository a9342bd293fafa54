//! Central finite-difference checks of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    (analytic - numeric).abs() / T::one().max(numeric.abs())
}

/// Max over coordinates of `|analytic - central| / max(1, |central|)` for a
/// scalar function of one tensor input.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let store = ParamStore::<T>::new();
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let mut scratch = store.clone();
    let grads = g.backward(y, &mut scratch)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor<T>| -> Result<T> {
        let mut g = Graph::inference();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let mut worst = T::zero();
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + h;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - h;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFiniteProbe(i));
        }
        let numeric = (fp - fm) / (h + h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check with respect to model parameters. At most `max_coords`
/// evenly spaced coordinates of each listed parameter are probed.
pub fn grad_check_params<T, F>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    f: F,
    h: T,
    max_coords: usize,
) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    g.backward(y, store)?;
    let analytic: Vec<Tensor<T>> = ids.iter().map(|&id| store.get(id).grad.clone()).collect();

    let eval = |s: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::inference();
        let y = f(&mut g, s)?;
        Ok(g.value(y).item())
    };

    let mut worst = T::zero();
    for (pi, &id) in ids.iter().enumerate() {
        let len = store.get(id).value.len();
        let step = (len / max_coords.max(1)).max(1);
        for i in (0..len).step_by(step) {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(TensorError::NonFiniteProbe(i));
            }
            let numeric = (fp - fm) / (h + h);
            worst = worst.max(relative_error(analytic[pi].data()[i], numeric));
        }
    }
    store.zero_grad();
    Ok(worst)
}
