//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { lr: 1e-4, betas: [0.9, 0.999], eps: 1e-8, weight_decay: 0.05 }
    }
}

impl AdamWParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && self.betas.iter().all(|b| (0.0..1.0).contains(b))
            && self.eps.is_finite()
            && self.eps > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("AdamW hyperparameters {self:?}")))
        }
    }
}

/// One AdamW update of a flat parameter slice at step `t` (1-based):
/// `p ← p − lr·wd·p`, then the bias-corrected Adam step.
pub fn adamw_step(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, hp: &AdamWParams) -> Result<()> {
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("param {}, grad {}, moments {}/{}", p.len(), g.len(), m.len(), v.len()),
        ));
    }
    let [b1, b2] = hp.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..p.len() {
        p[i] -= hp.lr * hp.weight_decay * p[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Optimizer state for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub hp: AdamWParams,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, hp: AdamWParams) -> Result<Self> {
        hp.validate()?;
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Ok(AdamW { hp, t: 0, m: zeros.clone(), v: zeros })
    }

    /// Applies one step. Parameters without a gradient are treated as
    /// having a zero gradient, so they still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape("AdamW::step", format!("{} grads for {} params", grads.len(), store.len())));
        }
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let zero;
            let g = match &grads[k] {
                Some(g) => g.as_slice(),
                None => {
                    zero = vec![0.0; p.len()];
                    &zero
                }
            };
            adamw_step(p, g, &mut self.m[k], &mut self.v[k], self.t, &self.hp)?;
        }
        Ok(())
    }
}
