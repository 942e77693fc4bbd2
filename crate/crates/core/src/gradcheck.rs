//! Central-difference gradient checking.
//!
//! Relative error per coordinate is `|analytic - numeric| / max(|analytic|,
//! |numeric|, REL_FLOOR)`; the floor keeps coordinates whose true gradient is
//! zero from turning rounding noise into a large ratio.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "check_gradient" });
    }
    Ok(v)
}

/// Tape gradient of `f` at `point`.
pub fn tape_gradient<F>(f: &F, point: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    Ok(tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]))
}

/// Max relative error between the tape gradient of scalar `f` and central
/// differences `(f(x+εe) − f(x−εe)) / 2ε`, over every coordinate.
pub fn check_gradient<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    check_gradient_at(f, point, &coords, eps)
}

/// As [`check_gradient`], restricted to the listed coordinates.
pub fn check_gradient_at<F>(f: F, point: &Tensor, coords: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = tape_gradient(&f, point)?;
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Loss value and parameter gradients for a given parameter set.
pub type ParamLoss<'a> = dyn Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Vec<f64>>)> + 'a;

/// Gradient check over selected parameter coordinates `(name, flat index)`.
pub fn check_param_gradient(
    store: &ParamStore,
    coords: &[(String, usize)],
    eps: f64,
    f: &ParamLoss<'_>,
) -> Result<f64> {
    let (_, grads) = f(store)?;
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (name, i) in coords {
        let analytic = grads.get(name).map_or(0.0, |g| g[*i]);
        let orig = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.clone()))?
            .data()[*i];
        probe.get_mut(name).unwrap().data_mut()[*i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite { op: "check_param_gradient" });
        }
        worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let p = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = check_gradient(|t, x| t.sum(x), &p, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn tanh_at_origin_matches_ones() {
        let p = Tensor::zeros(&[4]);
        let f = |t: &mut Tape, x: Var| {
            let y = t.tanh(x)?;
            t.sum(y)
        };
        assert_eq!(tape_gradient(&f, &p).unwrap(), vec![1.0; 4]);
        assert!(check_gradient(f, &p, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn non_finite_function_is_rejected() {
        let p = Tensor::vector(vec![1e-6]);
        let f = |t: &mut Tape, x: Var| {
            let y = t.log(x)?;
            t.sum(y)
        };
        assert!(check_gradient(f, &p, 1e-3).is_err());
    }
}
