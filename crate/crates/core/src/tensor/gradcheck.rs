use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error with the denominator floored at 1e-8.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input, flat index) of the worst coordinate.
    pub worst: (usize, usize),
    /// (analytic, numeric) derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+eps·e_i) − f(x−eps·e_i)) / 2eps` on every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, None)?;
    Ok(report.max_rel_err)
}

/// Multi-input variant. With `max_coords` set, each input is probed on at
/// most that many evenly spaced coordinates.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidParam(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    finite(tape.value(out))?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(tape);

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), worst_values: (0.0, 0.0), checked: 0 };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let step = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(step) {
            let orig = input.data()[idx];
            probe[which].data_mut()[idx] = orig + eps;
            let plus = eval(&f, &probe)?;
            probe[which].data_mut()[idx] = orig - eps;
            let minus = eval(&f, &probe)?;
            probe[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(analytic[which][idx], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (which, idx);
                report.worst_values = (analytic[which][idx], numeric);
            }
        }
    }
    Ok(report)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    finite(tape.value(out))
}

fn finite(t: &Tensor) -> Result<f64> {
    let v = t.item().ok_or_else(|| Error::NotScalar(t.shape().to_vec()))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("function value {v}")))
    }
}
