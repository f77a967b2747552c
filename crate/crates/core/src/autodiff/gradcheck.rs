//! Central-difference gradient verification.

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Floor of the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

/// A scalar computation over a [`ParamStore`].
pub trait Objective {
    /// Loss at the current parameter values; must not depend on gradients.
    fn loss(&mut self, params: &ParamStore) -> Result<f64>;

    /// Loss, with analytic gradients accumulated into `params`.
    fn loss_and_grad(&mut self, params: &mut ParamStore) -> Result<f64>;
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst relative error between `analytic` and the central difference
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` over all coordinates of `point`.
pub fn max_relative_error(
    point: &[f64],
    analytic: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<f64> {
    if point.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "gradient length {} for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("objective not finite at coordinate {i}")));
        }
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

/// Compares the analytic gradients of `objective` against central
/// differences for every coordinate of every parameter; returns the worst
/// relative error. Parameter values are restored and gradients zeroed on
/// return.
pub fn grad_check(objective: &mut impl Objective, params: &mut ParamStore, h: f64) -> Result<f64> {
    params.zero_grads();
    let base = objective.loss_and_grad(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric("objective not finite".into()));
    }
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(n, p)| (n.to_string(), p.grad.data().to_vec()))
        .collect();
    params.zero_grads();

    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        for (i, &g) in grad.iter().enumerate() {
            let orig = params.get(name)?.value.data()[i];
            params.get_mut(name)?.value.data_mut()[i] = orig + h;
            let plus = objective.loss(params);
            params.get_mut(name)?.value.data_mut()[i] = orig - h;
            let minus = objective.loss(params);
            params.get_mut(name)?.value.data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("objective not finite at {name}[{i}]")));
            }
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(g, fd));
        }
    }
    Ok(worst)
}
