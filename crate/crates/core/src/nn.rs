//! Parameterized layers shared by the backbone and the task heads, and a
//! finite-difference check over every parameter of a [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamId, ParamStore, Session};
use crate::tensor::{rel_err, GradCheckReport, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// `[d_out, d_in]` weight drawn from a truncated normal, zero bias.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), trunc_normal(rng, &[d_out, d_in], INIT_STD));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([d_out])));
        Linear { w, b }
    }

    pub fn d_in(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[1]
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[0]
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let b = self.b.map(|b| s.p(b));
        s.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::ones([dim]));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros([dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Central-difference check of `f` with respect to the parameters in
/// `store` (all of them, or `only`). Each parameter tensor is probed on at
/// most `max_coords` evenly spaced coordinates when that is set.
pub fn grad_check_params<F>(
    store: &ParamStore,
    only: Option<&[ParamId]>,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidParam(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let grads = {
        let mut s = Session::new(store, true);
        let out = f(&mut s)?;
        scalar(s.tape.value(out))?;
        s.tape.backward(out)?;
        s.param_grads()
    };
    let eval = |probe: &ParamStore| -> Result<f64> {
        let mut s = Session::new(probe, false);
        let out = f(&mut s)?;
        scalar(s.tape.value(out))
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), worst_values: (0.0, 0.0), checked: 0 };
    for id in ids {
        let n = store.get(id).numel();
        let step = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for k in (0..n).step_by(step) {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g[k]);
            let err = rel_err(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (id.index(), k);
                report.worst_values = (analytic, numeric);
            }
        }
    }
    Ok(report)
}

fn scalar(t: &Tensor) -> Result<f64> {
    let v = t.item().ok_or_else(|| Error::NotScalar(t.shape().to_vec()))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("function value {v}")))
    }
}
