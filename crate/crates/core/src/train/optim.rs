use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `θ ← θ − lr·wd·θ`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    m: IndexMap<String, Vec<S>>,
    v: IndexMap<String, Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros = |t: &crate::tensor::Tensor<S>| vec![S::zero(); t.numel()];
        Self {
            step: 0,
            m: store.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
            v: store.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are treated as having zero gradient.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &IndexMap<String, Vec<S>>,
    state: &mut AdamState<S>,
    learning_rate: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let lr = S::lit(learning_rate);
    let eps = S::lit(cfg.eps);
    let decay = S::lit(learning_rate * cfg.weight_decay);
    for (name, param) in store.iter_mut() {
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(Error::MissingParam(name.to_string()));
        };
        let g = grads.get(name);
        if let Some(g) = g {
            if g.len() != m.len() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    m.len()
                )));
            }
        }
        let data = param.data_mut();
        for i in 0..data.len() {
            let gi = g.map_or(S::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (S::one() - b1) * gi;
            v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps) - decay * data[i];
        }
    }
    Ok(())
}
