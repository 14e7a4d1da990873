use crate::error::{Error, Result};

use super::ParamStore;

pub const DEFAULT_FD_EPS: f64 = 1e-4;

/// Central finite-difference gradient of a scalar objective, one coordinate at a time.
pub fn finite_difference_gradient<Fun>(
    f: Fun,
    theta: &ParamStore<f64>,
    eps: f64,
) -> Result<ParamStore<f64>>
where
    Fun: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let mut point = theta.clone();
    let mut grads = theta.zeros_like();
    let names: Vec<String> = theta.names().map(str::to_string).collect();
    for name in &names {
        let n = theta.get(name)?.numel();
        for i in 0..n {
            let orig = theta.get(name)?.data()[i];
            point.get_mut(name)?.data_mut()[i] = orig + eps;
            let plus = f(&point)?;
            point.get_mut(name)?.data_mut()[i] = orig - eps;
            let minus = f(&point)?;
            point.get_mut(name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteObjective(format!("{name}[{i}]")));
            }
            grads.get_mut(name)?.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Largest coordinate-wise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &ParamStore<f64>, b: &ParamStore<f64>, floor: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (name, ta) in a.iter() {
        let tb = b.get(name)?;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(worst)
}
