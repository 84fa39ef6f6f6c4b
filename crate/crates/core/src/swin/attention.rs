//! Multi-head self-attention inside windows, with the learnable relative
//! position bias.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// For every (query, key) pair of a `ws×ws` window, the row of the bias
/// table holding their relative offset. Row-major over `[T, T]`.
pub fn relative_position_index(ws: usize) -> Vec<usize> {
    let t = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / ws, i % ws);
        for j in 0..t {
            let (yj, xj) = (j / ws, j % ws);
            let dy = yi + ws - 1 - yj;
            let dx = xi + ws - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Gathers a `[(2ws−1)², heads]` table into the `[heads, T, T]` bias.
pub fn relative_position_bias(tape: &mut Tape, table: Var, ws: usize) -> Result<Var> {
    let span = 2 * ws - 1;
    let heads = match *tape.shape(table) {
        [rows, heads] if rows == span * span => heads,
        ref s => return Err(Error::shape("relative_position_bias", format!("table {s:?} for window {ws}"))),
    };
    let idx = relative_position_index(ws);
    let t = ws * ws;
    let mut map = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        map.extend(idx.iter().map(|&r| r * heads + h));
    }
    tape.reindex(table, &[heads, t, t], Arc::from(map))
}

/// Projection weights of one attention layer, already bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct MsaVars {
    /// `[3D, D]`: query, key and value projections stacked in that order.
    pub qkv_w: Var,
    pub qkv_b: Option<Var>,
    /// `[D, D]`.
    pub proj_w: Var,
    pub proj_b: Option<Var>,
}

/// Gathers head `h`'s slice of the query, key or value projection from a
/// `[nW, T, 3D]` tensor into `[nW, heads, T, hd]`.
fn head_split_map(nw: usize, t: usize, heads: usize, hd: usize, which: usize) -> Vec<usize> {
    let d = heads * hd;
    let mut map = Vec::with_capacity(nw * t * d);
    for n in 0..nw {
        for h in 0..heads {
            for i in 0..t {
                let base = (n * t + i) * 3 * d + which * d + h * hd;
                map.extend(base..base + hd);
            }
        }
    }
    map
}

/// Window attention `[nW, T, D] → [nW, T, D]`. Returns the output and the
/// attention probabilities `[nW, heads, T, T]`.
pub fn window_msa_traced(
    tape: &mut Tape,
    x: Var,
    w: &MsaVars,
    bias: Option<Var>,
    mask: Option<&Tensor>,
    heads: usize,
) -> Result<(Var, Var)> {
    let (nw, t, d) = match *tape.shape(x) {
        [nw, t, d] => (nw, t, d),
        ref s => return Err(Error::shape("window_msa", format!("expected [nW,T,D], got {s:?}"))),
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("window_msa", format!("D={d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let qkv = tape.linear(x, w.qkv_w, w.qkv_b)?;
    if tape.shape(qkv) != [nw, t, 3 * d] {
        return Err(Error::shape("window_msa", format!("qkv output {:?} for D={d}", tape.shape(qkv))));
    }
    let split_shape = [nw, heads, t, hd];
    let q = tape.reindex(qkv, &split_shape, head_split_map(nw, t, heads, hd, 0).into())?;
    let k = tape.reindex(qkv, &split_shape, head_split_map(nw, t, heads, hd, 1).into())?;
    let v = tape.reindex(qkv, &split_shape, head_split_map(nw, t, heads, hd, 2).into())?;
    let q = tape.scale(q, 1.0 / (hd as f64).sqrt())?;
    let kt = tape.transpose(k)?;
    let mut scores = tape.matmul(q, kt)?;
    if let Some(b) = bias {
        if tape.shape(b) != [heads, t, t] {
            return Err(Error::shape("window_msa", format!("bias {:?}, expected [{heads},{t},{t}]", tape.shape(b))));
        }
        scores = tape.add(scores, b)?;
    }
    if let Some(m) = mask {
        if m.shape() != [nw, t, t] {
            return Err(Error::shape("window_msa", format!("mask {:?}, expected [{nw},{t},{t}]", m.shape())));
        }
        let m = tape.constant(m.reshape([nw, 1, t, t])?);
        scores = tape.add(scores, m)?;
    }
    let attn = tape.softmax(scores, 3)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[nw, t, d])?;
    let out = tape.linear(out, w.proj_w, w.proj_b)?;
    Ok((out, attn))
}

pub fn window_msa(
    tape: &mut Tape,
    x: Var,
    w: &MsaVars,
    bias: Option<Var>,
    mask: Option<&Tensor>,
    heads: usize,
) -> Result<Var> {
    window_msa_traced(tape, x, w, bias, mask, heads).map(|(out, _)| out)
}
