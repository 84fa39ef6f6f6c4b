//! Finite-difference checks of every differentiable tape op, the composed
//! CBAM block and a nano-width W-MSA/SW-MSA block pair.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cbam::{channel_attention_map, refine, spatial_attention_map, MapVars, RefineMode};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::swin::{block_pair_forward, BlockSpec, SwinBlock, SwinConfig};
use crate::tensor::{grad_check_many, rel_err, GradCheckReport, PoolMode, Tape, Tensor, Var, ZERO_FILL};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Worst coordinate as `input[index]` with its (analytic, numeric) pair.
    pub worst: String,
    pub worst_values: (f64, f64),
    /// Coordinates whose gradient is exactly zero by construction, checked
    /// against an absolute bound instead (the finite difference there is
    /// pure roundoff).
    pub structural_zeros: usize,
    pub max_abs_structural: f64,
    pub passed: bool,
}

/// Largest allowed finite difference on a structurally zero coordinate.
pub const STRUCTURAL_ZERO_BOUND: f64 = 1e-8;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values in ±[0.2, 1.2], away from the kinks of relu and the pole of div.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.2);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weighted sum with fixed distinct weights.
fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(probe_weights(&shape));
    let m = tape.mul(y, w)?;
    tape.sum(m)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = Vec::new();
    let a = uniform(rng, &[3, 4]);
    let b = uniform(rng, &[3, 4]);
    let row = uniform(rng, &[1, 4]);
    cases.push(("add", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.add(v[0], v[1])?; probe(t, y) })));
    cases.push(("add_broadcast", vec![a.clone(), row.clone()], Box::new(|t, v| { let y = t.add(v[0], v[1])?; probe(t, y) })));
    cases.push(("sub", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; probe(t, y) })));
    cases.push(("mul", vec![a.clone(), row.clone()], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; probe(t, y) })));
    cases.push((
        "div",
        vec![a.clone(), away_from_zero(rng, &[3, 4])],
        Box::new(|t, v| { let y = t.div(v[0], v[1])?; probe(t, y) }),
    ));
    cases.push(("scale", vec![a.clone()], Box::new(|t, v| { let y = t.scale(v[0], -1.7)?; probe(t, y) })));
    cases.push(("add_scalar", vec![a.clone()], Box::new(|t, v| { let y = t.add_scalar(v[0], 0.3)?; probe(t, y) })));
    cases.push(("sigmoid", vec![a.clone()], Box::new(|t, v| { let y = t.sigmoid(v[0])?; probe(t, y) })));
    cases.push(("relu", vec![away_from_zero(rng, &[3, 4])], Box::new(|t, v| { let y = t.relu(v[0])?; probe(t, y) })));
    cases.push(("gelu", vec![a.clone()], Box::new(|t, v| { let y = t.gelu(v[0])?; probe(t, y) })));
    cases.push(("reshape", vec![a.clone()], Box::new(|t, v| { let y = t.reshape(v[0], &[2, 6])?; probe(t, y) })));
    let map: Arc<[usize]> = Arc::from(vec![11, 0, ZERO_FILL, 5, 5, 3, ZERO_FILL, 7]);
    cases.push((
        "reindex",
        vec![a.clone()],
        Box::new(move |t, v| { let y = t.reindex(v[0], &[2, 4], map.clone())?; probe(t, y) }),
    ));
    let c3 = uniform(rng, &[2, 3, 4]);
    cases.push(("permute", vec![c3.clone()], Box::new(|t, v| { let y = t.permute(v[0], &[2, 0, 1])?; probe(t, y) })));
    cases.push(("transpose", vec![a.clone()], Box::new(|t, v| { let y = t.transpose(v[0])?; probe(t, y) })));
    cases.push((
        "concat",
        vec![a.clone(), uniform(rng, &[2, 4])],
        Box::new(|t, v| { let y = t.concat(&[v[0], v[1]], 0)?; probe(t, y) }),
    ));
    cases.push(("sum", vec![a.clone()], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; t.sum(y) })));
    cases.push(("mean", vec![a.clone()], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; t.mean(y) })));
    cases.push(("sum_axis", vec![c3.clone()], Box::new(|t, v| { let y = t.sum_axis(v[0], 1)?; probe(t, y) })));
    cases.push((
        "matmul",
        vec![uniform(rng, &[2, 3, 4]), uniform(rng, &[4, 5])],
        Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; probe(t, y) }),
    ));
    cases.push((
        "linear",
        vec![uniform(rng, &[5, 4]), uniform(rng, &[3, 4]), uniform(rng, &[3])],
        Box::new(|t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; probe(t, y) }),
    ));
    let img = uniform(rng, &[2, 5, 5]);
    let k3 = uniform(rng, &[3, 2, 3, 3]);
    cases.push((
        "conv2d",
        vec![img.clone(), k3.clone()],
        Box::new(|t, v| { let y = t.conv2d(v[0], v[1], 1, 1)?; probe(t, y) }),
    ));
    cases.push((
        "conv2d_stride2",
        vec![img.clone(), k3],
        Box::new(|t, v| { let y = t.conv2d(v[0], v[1], 2, 0)?; probe(t, y) }),
    ));
    cases.push(("softmax", vec![c3.clone()], Box::new(|t, v| { let y = t.softmax(v[0], 2)?; probe(t, y) })));
    cases.push(("softmax_inner", vec![c3.clone()], Box::new(|t, v| { let y = t.softmax(v[0], 1)?; probe(t, y) })));
    cases.push((
        "layer_norm",
        vec![uniform(rng, &[3, 6]), uniform(rng, &[6]), uniform(rng, &[6])],
        Box::new(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; probe(t, y) }),
    ));
    cases.push(("pool_spatial_avg", vec![img.clone()], Box::new(|t, v| { let y = t.pool_spatial(v[0], PoolMode::Avg)?; probe(t, y) })));
    cases.push(("pool_spatial_max", vec![img.clone()], Box::new(|t, v| { let y = t.pool_spatial(v[0], PoolMode::Max)?; probe(t, y) })));
    cases.push(("pool_channel_avg", vec![img.clone()], Box::new(|t, v| { let y = t.pool_channel(v[0], PoolMode::Avg)?; probe(t, y) })));
    cases.push(("pool_channel_max", vec![img], Box::new(|t, v| { let y = t.pool_channel(v[0], PoolMode::Max)?; probe(t, y) })));
    cases.push(("cross_entropy", vec![uniform(rng, &[4, 5])], Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 4, 1]))));
    cases.push((
        "bce_with_logits",
        vec![uniform(rng, &[6])],
        Box::new(|t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 0.3, 0.0])),
    ));
    // Residuals 0.3 and 2.5 sit on either side of beta = 1 without touching it.
    let targets: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 0.3 } else { 2.5 }).collect();
    cases.push((
        "smooth_l1",
        vec![Tensor::zeros([6])],
        Box::new(move |t, v| t.smooth_l1(v[0], &targets, &[1.0, 0.5, 1.0, 2.0, 0.0, 1.0], 1.0)),
    ));
    cases
}

struct Outcome {
    max_rel_err: f64,
    checked: usize,
    worst: String,
    worst_values: (f64, f64),
    zeros: usize,
    max_abs: f64,
}

impl Outcome {
    fn from_report(r: &GradCheckReport) -> Self {
        Outcome {
            max_rel_err: r.max_rel_err,
            checked: r.checked,
            worst: format!("input{}[{}]", r.worst.0, r.worst.1),
            worst_values: r.worst_values,
            zeros: 0,
            max_abs: 0.0,
        }
    }

    fn entry(self, name: &str, tol: f64) -> SuiteEntry {
        SuiteEntry {
            name: name.to_string(),
            max_rel_err: self.max_rel_err,
            checked: self.checked,
            worst: self.worst,
            worst_values: self.worst_values,
            structural_zeros: self.zeros,
            max_abs_structural: self.max_abs,
            passed: self.max_rel_err < tol && self.max_abs < STRUCTURAL_ZERO_BOUND,
        }
    }
}

fn probe_weights(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| (1.3 * i as f64 + 0.7).sin() + 0.1)
}

/// Central differences of `Σ w ⊙ f` over every coordinate of every
/// parameter in `store`; coordinates selected by `zero` are bounded
/// absolutely. The difference is taken per output element before the
/// weighted sum, so outputs a coordinate does not reach cancel exactly
/// instead of contributing summation roundoff.
fn check_store<F>(store: &ParamStore, f: F, eps: f64, zero: impl Fn(&str, usize) -> bool) -> Result<Outcome>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let (grads, weights) = {
        let mut s = Session::new(store, true);
        let y = f(&mut s)?;
        let weights = probe_weights(s.tape.shape(y));
        let w = s.tape.constant(weights.clone());
        let m = s.tape.mul(y, w)?;
        let loss = s.tape.sum(m)?;
        s.tape.backward(loss)?;
        (s.param_grads(), weights)
    };
    let eval = |probe: &ParamStore| -> Result<Tensor> {
        let mut s = Session::new(probe, false);
        let y = f(&mut s)?;
        let t = s.tape.value(y).clone();
        t.all_finite().then_some(t).ok_or_else(|| Error::NonFinite("block output".into()))
    };
    let mut probe = store.clone();
    let mut o = Outcome { max_rel_err: 0.0, checked: 0, worst: String::new(), worst_values: (0.0, 0.0), zeros: 0, max_abs: 0.0 };
    for (id, name, t) in store.iter() {
        for k in 0..t.numel() {
            let orig = t.data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let diff: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(weights.data())
                .map(|((p, m), w)| w * (p - m))
                .sum();
            let numeric = diff / (2.0 * eps);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g[k]);
            if zero(name, k) {
                o.zeros += 1;
                o.max_abs = o.max_abs.max(numeric.abs()).max(analytic.abs());
            } else {
                o.checked += 1;
                let err = rel_err(analytic, numeric);
                if err > o.max_rel_err || o.worst.is_empty() {
                    o.max_rel_err = err;
                    o.worst = format!("{name}[{k}]");
                    o.worst_values = (analytic, numeric);
                }
            }
        }
    }
    Ok(o)
}

/// Generic weights in ±`scale`; layer-norm gains in [0.75, 1.25] so no
/// feature is scaled to near zero (which would leave gradients at the
/// roundoff floor of the finite differences).
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.name(id).contains(".norm") && store.name(id).ends_with(".weight");
        let shape = store.get(id).shape().to_vec();
        let t = if gain {
            Tensor::from_fn(shape, |_| rng.random_range(0.75..1.25))
        } else {
            Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
        };
        store.set(id, t)?;
    }
    Ok(())
}

/// W-MSA then SW-MSA block at the first-stage width of the nano config on
/// a 4×4 token grid, differentiated with respect to the input tokens and
/// every block parameter. With `cbam` the pair carries channel attention
/// before W-MSA and spatial attention before SW-MSA.
fn block_pair_entry(rng: &mut ChaCha8Rng, cbam: bool, eps: f64, tol: f64) -> Result<SuiteEntry> {
    let nano = SwinConfig::nano();
    let d = nano.embed_dim;
    let spec = |shift, mode| BlockSpec {
        dim: d,
        heads: nano.num_heads[0],
        window: nano.window_size,
        shift,
        mlp_hidden: (d as f64 * nano.mlp_ratio) as usize,
        rel_pos_bias: true,
        cbam: cbam.then_some((mode, nano.cbam_reduction)),
    };
    let mut store = ParamStore::new();
    let x = store.add("x", uniform(rng, &[16, d]));
    let b0 = SwinBlock::register(&mut store, "b0", spec(0, RefineMode::ChannelOnly), rng)?;
    let b1 = SwinBlock::register(&mut store, "b1", spec(nano.window_size / 2, RefineMode::SpatialOnly), rng)?;
    randomize(&mut store, rng, 0.5)?;
    let pair = [b0, b1];
    // Softmax is invariant to a key offset shared by all scores of a query,
    // so the key third of each qkv bias has an exactly zero gradient.
    let key_bias = |name: &str, k: usize| name.ends_with("attn.qkv.bias") && (d..2 * d).contains(&k);
    let outcome = check_store(
        &store,
        |s| {
            let xv = s.p(x);
            block_pair_forward(s, xv, (4, 4), &pair)
        },
        eps,
        key_bias,
    )?;
    Ok(outcome.entry(if cbam { "swin_block_pair_cbam" } else { "swin_block_pair" }, tol))
}

fn cbam_entry(rng: &mut ChaCha8Rng, eps: f64, tol: f64) -> Result<SuiteEntry> {
    let c = 4;
    let inputs =
        [uniform(rng, &[c, 5, 6]), uniform(rng, &[c / 2, c]), uniform(rng, &[c, c / 2]), uniform(rng, &[1, 2, 7, 7])];
    let report = grad_check_many(
        |tape, v| {
            let channel = Some(channel_attention_map(tape, v[0], v[1], v[2])?);
            let spatial = Some(spatial_attention_map(tape, v[0], v[3])?);
            let out = refine(tape, v[0], &MapVars { channel, spatial }, RefineMode::Both)?;
            probe(tape, out)
        },
        &inputs,
        eps,
        None,
    )?;
    Ok(Outcome::from_report(&report).entry("cbam_block", tol))
}

/// Runs the whole suite. Entries are ordered ops, CBAM, block pairs.
pub fn gradient_suite(seed: u64, eps: f64, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidParam(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases(&mut rng) {
        let report = grad_check_many(|t, v| f(t, v), &inputs, eps, None)?;
        out.push(Outcome::from_report(&report).entry(name, tolerance));
    }
    out.push(cbam_entry(&mut rng, eps, tolerance)?);
    out.push(block_pair_entry(&mut rng, false, eps, tolerance)?);
    out.push(block_pair_entry(&mut rng, true, eps, tolerance)?);
    Ok(out)
}
