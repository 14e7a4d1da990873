use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

use super::{ParamStore, Real};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment accumulators and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub hyper: AdamW,
    pub step: u64,
    pub first: ParamStore<F>,
    pub second: ParamStore<F>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &ParamStore<F>, hyper: AdamW) -> Self {
        Self { hyper, step: 0, first: params.zeros_like(), second: params.zeros_like() }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
pub fn adamw_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &ParamStore<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    let h = state.hyper;
    if !(h.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", h.lr)));
    }
    for (name, p) in params.iter() {
        let g = grads.get(name)?;
        let m = state.first.get(name)?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(shape_err("adamw_step", name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let (b1, b2) = (F::lit(h.beta1), F::lit(h.beta2));
    let (one, lr, eps) = (F::one(), F::lit(h.lr), F::lit(h.eps));
    let decay = F::lit(1.0 - h.lr * h.weight_decay);
    let (bc1, bc2) = (F::lit(bc1), F::lit(bc2));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?.data();
        let m = state.first.get_mut(name)?.data_mut();
        let v = state.second.get_mut(name)?.data_mut();
        for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * *gi;
            *vi = b2 * *vi + (one - b2) * *gi * *gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x = *x * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
