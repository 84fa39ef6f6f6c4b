use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{broadcast_offsets, broadcast_shape, strides, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Index placed in a [`Tape::reindex`] map to produce a zero instead of a
/// gathered value (used for padding).
pub const ZERO_FILL: usize = usize::MAX;

const GELU_K0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K1: f64 = 0.044_715;

/// Handle to a node recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, k: usize, stride: usize, pad: usize },
    Softmax { x: usize, axis: usize },
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    LayerNorm { x: usize, g: usize, b: usize, mean: Vec<f64>, rstd: Vec<f64> },
    PoolSpatial { x: usize, argmax: Option<Vec<usize>> },
    PoolChannel { x: usize, argmax: Option<Vec<usize>> },
    Reindex { x: usize, map: Arc<[usize]> },
    Concat { parts: Vec<usize>, axis: usize },
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { x: usize, targets: Vec<f64> },
    SmoothL1 { x: usize, targets: Vec<f64>, weights: Vec<f64>, beta: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Each backward call zeroes every gradient
/// before replaying, so gradients never accumulate across calls.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Value of a node. Panics if `v` was recorded on another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx as usize].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.idx as usize].requires_grad
    }

    /// Gradient from the most recent backward call, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.idx as usize).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node's value.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?;
        Some(Tensor::from_parts(self.value(v).shape().to_vec(), g.to_vec()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx }
    }

    fn ix(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx as usize >= self.nodes.len() {
            return Err(Error::NoTape);
        }
        Ok(v.idx as usize)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.ix(a)?, self.ix(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&shape, ta.shape());
            let ob = broadcast_offsets(&shape, tb.shape());
            oa.iter().zip(&ob).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect()
        };
        Ok((ia, ib, Tensor::from_parts(shape, data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Sub(ia, ib), rg))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Mul(ia, ib), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Div(ia, ib), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.ix(x)?;
        let t = self.val(i).map(|v| v * c);
        let rg = self.rg(i);
        Ok(self.push(t, Op::Scale(i, c), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.ix(x)?;
        let t = self.val(i).map(|v| v + c);
        let rg = self.rg(i);
        Ok(self.push(t, Op::AddScalar(i), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let i = self.ix(x)?;
        let t = self.val(i).map(f);
        let rg = self.rg(i);
        Ok(self.push(t, op(i), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    /// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, gelu, Op::Gelu)
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.ix(x)?;
        let t = self.val(i).reshape(shape.to_vec()).map_err(|_| {
            Error::shape("reshape", format!("{:?} -> {shape:?}", self.val(i).shape()))
        })?;
        let rg = self.rg(i);
        Ok(self.push(t, Op::Reshape(i), rg))
    }

    /// Gathers `out[k] = x.flat[map[k]]` into a tensor of `shape`;
    /// [`ZERO_FILL`] entries produce zeros. Every permutation, window
    /// traversal, roll and pad in the crate goes through here.
    pub fn reindex(&mut self, x: Var, shape: &[usize], map: Arc<[usize]>) -> Result<Var> {
        let i = self.ix(x)?;
        let n: usize = shape.iter().product();
        if map.len() != n || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reindex", format!("map of {} for shape {shape:?}", map.len())));
        }
        let src = self.val(i).data();
        let mut data = Vec::with_capacity(n);
        for &m in map.iter() {
            if m == ZERO_FILL {
                data.push(0.0);
            } else if m < src.len() {
                data.push(src[m]);
            } else {
                return Err(Error::shape("reindex", format!("index {m} out of {}", src.len())));
            }
        }
        let rg = self.rg(i);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reindex { x: i, map }, rg))
    }

    /// Axis permutation: output axis `k` is input axis `axes[k]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidParam(format!("bad permutation {axes:?} for rank {}", shape.len())));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = strided_map(&out_shape, &mapped, 0);
        self.reindex(x, &out_shape, map.into())
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidParam("concat of zero tensors".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.ix(p)).collect::<Result<_>>()?;
        let first = self.val(idx[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidParam(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.val(i).shape();
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !same_rest {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let t = self.val(i);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { parts: idx, axis }, rg))
    }

    // ---------------------------------------------------------------- reductions

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.ix(x)?;
        let s: f64 = self.val(i).data().iter().sum();
        let rg = self.rg(i);
        Ok(self.push(Tensor::scalar(s), Op::Sum(i), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.ix(x)?;
        let shape = self.val(i).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidParam(format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.val(i).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.rg(i);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::SumAxis { x: i, axis }, rg))
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]` with
    /// broadcasting over the batch prefix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.ix(a)?, self.ix(b)?);
        let plan = MatMulPlan::new(self.val(ia).shape(), self.val(ib).shape())?;
        let mut out = vec![0.0; plan.batch_len() * plan.m * plan.n];
        let (ad, bd) = (self.val(ia).data(), self.val(ib).data());
        for (z, (&oa, &ob)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
            gemm_nn(
                &ad[oa..oa + plan.m * plan.k],
                &bd[ob..ob + plan.k * plan.n],
                &mut out[z * plan.m * plan.n..(z + 1) * plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            );
        }
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::from_parts(plan.out_shape, out), Op::MatMul(ia, ib), rg))
    }

    /// Affine map on the trailing axis: `x · wᵀ + bias`, `w` is `[D_out, D_in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.ix(x)?, self.ix(w)?);
        let ib = bias.map(|b| self.ix(b)).transpose()?;
        let xs = self.val(ix).shape().to_vec();
        let ws = self.val(iw).shape();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(Error::shape("linear", format!("x {xs:?} with w {ws:?}")));
        }
        let (dout, din) = (ws[0], ws[1]);
        if let Some(ib) = ib {
            if self.val(ib).shape() != [dout] {
                return Err(Error::shape("linear", format!("bias {:?} for D_out {dout}", self.val(ib).shape())));
            }
        }
        let rows = self.val(ix).numel() / din;
        let mut out = vec![0.0; rows * dout];
        {
            let (xd, wd) = (self.val(ix).data(), self.val(iw).data());
            gemm_nt(xd, wd, &mut out, rows, din, dout);
            if let Some(ib) = ib {
                let bd = self.val(ib).data();
                for row in out.chunks_mut(dout) {
                    for (o, &b) in row.iter_mut().zip(bd) {
                        *o += b;
                    }
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x: ix, w: iw, b: ib }, rg))
    }

    /// 2-D convolution of a `[C_in, H, W]` map with a `[C_out, C_in, kh, kw]`
    /// kernel, zero padding on all sides.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, ik) = (self.ix(x)?, self.ix(kernel)?);
        if stride < 1 {
            return Err(Error::InvalidParam("conv2d stride must be >= 1".into()));
        }
        let xs = self.val(ix).shape();
        let ks = self.val(ik).shape();
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] {
            return Err(Error::shape("conv2d", format!("input {xs:?} with kernel {ks:?}")));
        }
        let geo = ConvGeom::new(xs, ks, stride, pad)?;
        let mut out = vec![0.0; geo.co * geo.ho * geo.wo];
        let (xd, kd) = (self.val(ix).data(), self.val(ik).data());
        geo.for_each_tap(|o_idx, x_idx, k_idx| out[o_idx] += xd[x_idx] * kd[k_idx]);
        let rg = self.rg(ix) || self.rg(ik);
        let shape = vec![geo.co, geo.ho, geo.wo];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x: ix, k: ik, stride, pad }, rg))
    }

    // ---------------------------------------------------------------- normalization

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.ix(x)?;
        let shape = self.val(i).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidParam(format!("softmax axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.val(i).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |k: usize| (o * len + k) * inner + j;
                let mx = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let rg = self.rg(i);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x: i, axis }, rg))
    }

    /// Normalizes each trailing-axis slice to zero mean and unit (population)
    /// variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.ix(x)?, self.ix(gamma)?, self.ix(beta)?);
        let xs = self.val(ix).shape().to_vec();
        let d = *xs.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if self.val(ig).shape() != [d] || self.val(ib).shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for D {d}", self.val(ig).shape(), self.val(ib).shape()),
            ));
        }
        let rows = self.val(ix).numel() / d;
        let (xd, gd, bd) = (self.val(ix).data(), self.val(ig).data(), self.val(ib).data());
        let mut out = vec![0.0; xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for k in 0..d {
                out[r * d + k] = (row[k] - mean) * rstd * gd[k] + bd[k];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let op = Op::LayerNorm { x: ix, g: ig, b: ib, mean: means, rstd: rstds };
        Ok(self.push(Tensor::from_parts(xs, out), op, rg))
    }

    // ---------------------------------------------------------------- pooling

    /// Per-channel reduction over the spatial extent: `[C,H,W] -> [C,1,1]`.
    pub fn pool_spatial(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let i = self.ix(x)?;
        let (c, h, w) = chw("pool_spatial", self.val(i).shape())?;
        let src = self.val(i).data();
        let hw = h * w;
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::new();
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            match mode {
                PoolMode::Avg => out.push(plane.iter().sum::<f64>() / hw as f64),
                PoolMode::Max => {
                    let k = argmax_first(plane);
                    argmax.push(ch * hw + k);
                    out.push(plane[k]);
                }
            }
        }
        let rg = self.rg(i);
        let argmax = (mode == PoolMode::Max).then_some(argmax);
        Ok(self.push(Tensor::from_parts(vec![c, 1, 1], out), Op::PoolSpatial { x: i, argmax }, rg))
    }

    /// Per-pixel reduction across channels: `[C,H,W] -> [1,H,W]`.
    pub fn pool_channel(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let i = self.ix(x)?;
        let (c, h, w) = chw("pool_channel", self.val(i).shape())?;
        let src = self.val(i).data();
        let hw = h * w;
        let mut out = Vec::with_capacity(hw);
        let mut argmax = Vec::new();
        for p in 0..hw {
            match mode {
                PoolMode::Avg => out.push((0..c).map(|ch| src[ch * hw + p]).sum::<f64>() / c as f64),
                PoolMode::Max => {
                    let mut best = 0;
                    for ch in 1..c {
                        if src[ch * hw + p] > src[best * hw + p] {
                            best = ch;
                        }
                    }
                    argmax.push(best * hw + p);
                    out.push(src[best * hw + p]);
                }
            }
        }
        let rg = self.rg(i);
        let argmax = (mode == PoolMode::Max).then_some(argmax);
        Ok(self.push(Tensor::from_parts(vec![1, h, w], out), Op::PoolChannel { x: i, argmax }, rg))
    }

    // ---------------------------------------------------------------- losses

    /// Mean softmax cross-entropy of `[B, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let i = self.ix(logits)?;
        let s = self.val(i).shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", format!("logits {s:?} for {} targets", targets.len())));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidParam(format!("target class {t} >= {k}")));
        }
        let src = self.val(i).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..k {
                probs[r * k + c] = (row[c] - mx).exp() / z;
            }
            loss -= row[targets[r]] - mx - z.ln();
        }
        let rg = self.rg(i);
        let op = Op::CrossEntropy { logits: i, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss / b as f64), op, rg))
    }

    /// Mean binary cross-entropy on logits against targets in [0, 1].
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let i = self.ix(x)?;
        let src = self.val(i).data();
        if src.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", format!("{} logits, {} targets", src.len(), targets.len())));
        }
        let loss: f64 = src
            .iter()
            .zip(targets)
            .map(|(&v, &t)| v.max(0.0) - v * t + (-v.abs()).exp().ln_1p())
            .sum::<f64>()
            / src.len() as f64;
        let rg = self.rg(i);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { x: i, targets: targets.to_vec() }, rg))
    }

    /// Weighted sum of smooth-L1 penalties `Σ w·ℓ(x − t)` with transition `beta`.
    pub fn smooth_l1(&mut self, x: Var, targets: &[f64], weights: &[f64], beta: f64) -> Result<Var> {
        let i = self.ix(x)?;
        let src = self.val(i).data();
        if src.len() != targets.len() || src.len() != weights.len() {
            return Err(Error::shape("smooth_l1", "targets/weights must match input length"));
        }
        if beta <= 0.0 {
            return Err(Error::InvalidParam("smooth_l1 beta must be positive".into()));
        }
        let loss: f64 = src
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&v, &t), &w)| {
                let d = (v - t).abs();
                w * if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta }
            })
            .sum();
        let rg = self.rg(i);
        let op = Op::SmoothL1 { x: i, targets: targets.to_vec(), weights: weights.to_vec(), beta };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. Gradients from earlier calls are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.ix(loss)?;
        let lv = self.val(li);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(li) {
            return Ok(());
        }
        self.grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, i: usize) -> Option<&mut Vec<f64>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let n = self.nodes[i].value.numel();
        Some(self.grads[i].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&mut self, node: usize, g: &[f64]) {
        // Ops hold owned copies of the input indices; the input values are
        // cloned out where a gradient target may alias them.
        let op = std::mem::replace(&mut self.nodes[node].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out_shape = self.nodes[node].value.shape().to_vec();
                for (&t, s) in [(a, 1.0), (b, sign)] {
                    let off = broadcast_offsets(&out_shape, self.val(t).shape());
                    if let Some(ga) = self.acc(t) {
                        for (k, &o) in off.iter().enumerate() {
                            ga[o] += s * g[k];
                        }
                    }
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let out_shape = self.nodes[node].value.shape().to_vec();
                let oa = broadcast_offsets(&out_shape, self.val(*a).shape());
                let ob = broadcast_offsets(&out_shape, self.val(*b).shape());
                let ad = self.val(*a).data().to_vec();
                let bd = self.val(*b).data().to_vec();
                let is_div = matches!(op, Op::Div(..));
                if let Some(ga) = self.acc(*a) {
                    for k in 0..g.len() {
                        let d = if is_div { 1.0 / bd[ob[k]] } else { bd[ob[k]] };
                        ga[oa[k]] += g[k] * d;
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for k in 0..g.len() {
                        let (av, bv) = (ad[oa[k]], bd[ob[k]]);
                        let d = if is_div { -av / (bv * bv) } else { av };
                        gb[ob[k]] += g[k] * d;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(*x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.acc(*x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[node].value.data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.val(*x).data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.val(*x).data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * gelu_grad(xv[k]);
                    }
                }
            }
            Op::Reindex { x, map } => {
                if let Some(gx) = self.acc(*x) {
                    for (k, &m) in map.iter().enumerate() {
                        if m != ZERO_FILL {
                            gx[m] += g[k];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[node].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&shape, *axis);
                let mut start = 0;
                for &p in parts {
                    let len = self.val(p).shape()[*axis];
                    if let Some(gp) = self.acc(p) {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    start += len;
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let shape = self.val(*x).shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                if let Some(gx) = self.acc(*x) {
                    for o in 0..outer {
                        for k in 0..len {
                            for j in 0..inner {
                                gx[(o * len + k) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let plan = MatMulPlan::new(self.val(*a).shape(), self.val(*b).shape()).expect("validated in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let ad = self.val(*a).data().to_vec();
                let bd = self.val(*b).data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for (z, (&oa, &ob)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                        gemm_nt(&g[z * m * n..(z + 1) * m * n], &bd[ob..ob + k * n], &mut ga[oa..oa + m * k], m, n, k);
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for (z, (&oa, &ob)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                        gemm_tn(&ad[oa..oa + m * k], &g[z * m * n..(z + 1) * m * n], &mut gb[ob..ob + k * n], m, k, n);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.val(*w).shape();
                let (dout, din) = (ws[0], ws[1]);
                let rows = g.len() / dout;
                let xd = self.val(*x).data().to_vec();
                let wd = self.val(*w).data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    gemm_nn(g, &wd, gx, rows, dout, din);
                }
                if let Some(gw) = self.acc(*w) {
                    gemm_tn(g, &xd, gw, rows, dout, din);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(*b) {
                        for row in g.chunks(dout) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let geo = ConvGeom::new(self.val(*x).shape(), self.val(*k).shape(), *stride, *pad)
                    .expect("validated in forward");
                let xd = self.val(*x).data().to_vec();
                let kd = self.val(*k).data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    geo.for_each_tap(|o, xi, ki| gx[xi] += g[o] * kd[ki]);
                }
                if let Some(gk) = self.acc(*k) {
                    geo.for_each_tap(|o, xi, ki| gk[ki] += g[o] * xd[xi]);
                }
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[node].value.data().to_vec();
                let shape = self.nodes[node].value.shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                if let Some(gx) = self.acc(*x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + j;
                            let s: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, g: gi, b: bi, mean, rstd } => {
                let d = self.val(*gi).numel();
                let xd = self.val(*x).data().to_vec();
                let gd = self.val(*gi).data().to_vec();
                let rows = xd.len() / d;
                let xhat = |r: usize, k: usize| (xd[r * d + k] - mean[r]) * rstd[r];
                if let Some(gx) = self.acc(*x) {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for k in 0..d {
                            let dxh = g[r * d + k] * gd[k];
                            m1 += dxh;
                            m2 += dxh * xhat(r, k);
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for k in 0..d {
                            let dxh = g[r * d + k] * gd[k];
                            gx[r * d + k] += rstd[r] * (dxh - m1 - xhat(r, k) * m2);
                        }
                    }
                }
                if let Some(gg) = self.acc(*gi) {
                    for r in 0..rows {
                        for k in 0..d {
                            gg[k] += g[r * d + k] * xhat(r, k);
                        }
                    }
                }
                if let Some(gb) = self.acc(*bi) {
                    for r in 0..rows {
                        for k in 0..d {
                            gb[k] += g[r * d + k];
                        }
                    }
                }
            }
            Op::PoolSpatial { x, argmax } => {
                let (_, h, w) = chw("pool_spatial", self.val(*x).shape()).expect("validated");
                let hw = h * w;
                if let Some(gx) = self.acc(*x) {
                    match argmax {
                        Some(am) => {
                            for (ch, &src) in am.iter().enumerate() {
                                gx[src] += g[ch];
                            }
                        }
                        None => {
                            for (ch, &gv) in g.iter().enumerate() {
                                for v in &mut gx[ch * hw..(ch + 1) * hw] {
                                    *v += gv / hw as f64;
                                }
                            }
                        }
                    }
                }
            }
            Op::PoolChannel { x, argmax } => {
                let (c, h, w) = chw("pool_channel", self.val(*x).shape()).expect("validated");
                let hw = h * w;
                if let Some(gx) = self.acc(*x) {
                    match argmax {
                        Some(am) => {
                            for (p, &src) in am.iter().enumerate() {
                                gx[src] += g[p];
                            }
                        }
                        None => {
                            for ch in 0..c {
                                for p in 0..hw {
                                    gx[ch * hw + p] += g[p] / c as f64;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let b = targets.len();
                let k = probs.len() / b;
                if let Some(gx) = self.acc(*logits) {
                    for r in 0..b {
                        for c in 0..k {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            gx[r * k + c] += g[0] * (probs[r * k + c] - onehot) / b as f64;
                        }
                    }
                }
            }
            Op::BceWithLogits { x, targets } => {
                let xv = self.val(*x).data().to_vec();
                let n = xv.len() as f64;
                if let Some(gx) = self.acc(*x) {
                    for k in 0..xv.len() {
                        gx[k] += g[0] * (sigmoid(xv[k]) - targets[k]) / n;
                    }
                }
            }
            Op::SmoothL1 { x, targets, weights, beta } => {
                let xv = self.val(*x).data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for k in 0..xv.len() {
                        let d = xv[k] - targets[k];
                        let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                        gx[k] += g[0] * weights[k] * dd;
                    }
                }
            }
        }
        self.nodes[node].op = op;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_K0 * (v + GELU_K1 * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let t = (GELU_K0 * (v + GELU_K1 * v * v * v)).tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K0 * (1.0 + 3.0 * GELU_K1 * v * v)
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = k;
        }
    }
    best
}

fn chw(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match s {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::shape(op, format!("expected [C,H,W], got {s:?}"))),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Flat source offsets for walking `out_shape` with per-axis source strides.
pub(crate) fn strided_map(out_shape: &[usize], src_strides: &[usize], base: usize) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = base;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", format!("operands must be at least 2-D: {a:?} x {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents differ: {a:?} x {b:?}")));
        }
        let (pa, pb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch = broadcast_shape("matmul", pa, pb)?;
        let a_off = broadcast_offsets(&batch, pa).into_iter().map(|o| o * m * k).collect();
        let b_off = broadcast_offsets(&batch, pb).into_iter().map(|o| o * k * n).collect();
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(MatMulPlan { m, k, n, out_shape, a_off, b_off })
    }

    fn batch_len(&self) -> usize {
        self.a_off.len()
    }
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::InvalidParam(format!("kernel {kh}x{kw} larger than padded input {h}x{w}+{pad}")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { ci, h, w, co, kh, kw, ho, wo, stride, pad })
    }

    /// Calls `f(out_index, input_index, kernel_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for o in 0..self.co {
            for c in 0..self.ci {
                for i in 0..self.kh {
                    for j in 0..self.kw {
                        let ki = ((o * self.ci + c) * self.kh + i) * self.kw + j;
                        for y in 0..self.ho {
                            let iy = (y * self.stride + i) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for x in 0..self.wo {
                                let ix = (x * self.stride + j) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let xi = (c * self.h + iy as usize) * self.w + ix as usize;
                                f((o * self.ho + y) * self.wo + x, xi, ki);
                            }
                        }
                    }
                }
            }
        }
    }
}
