use rand::Rng;

use super::attention::{relative_position_bias, window_msa, MsaVars};
use super::window::WindowLayout;
use crate::cbam::{Cbam, RefineMode};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, INIT_STD};
use crate::params::{trunc_normal, ParamId, ParamStore, Session};
use crate::tensor::Var;

/// Static shape of one transformer block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    /// 0 for W-MSA, `window/2` for SW-MSA.
    pub shift: usize,
    pub mlp_hidden: usize,
    pub rel_pos_bias: bool,
    /// CBAM half inserted after the first norm, with its reduction ratio.
    pub cbam: Option<(RefineMode, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwinBlock {
    pub spec: BlockSpec,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    /// `[(2·window−1)², heads]`.
    pub rel_table: Option<ParamId>,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub cbam: Option<Cbam>,
}

impl SwinBlock {
    pub fn register(store: &mut ParamStore, prefix: &str, spec: BlockSpec, rng: &mut impl Rng) -> Result<Self> {
        let d = spec.dim;
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::InvalidParam(format!("{prefix}: dim {d} not divisible by {} heads", spec.heads)));
        }
        let norm1 = LayerNorm::register(store, &format!("{prefix}.norm1"), d);
        let cbam = match spec.cbam {
            Some((mode, r)) => Some(Cbam::register(store, &format!("{prefix}.cbam"), d, r, mode, rng)?),
            None => None,
        };
        let qkv = Linear::register(store, &format!("{prefix}.attn.qkv"), d, 3 * d, true, rng);
        let span = 2 * spec.window - 1;
        let rel_table = spec.rel_pos_bias.then(|| {
            store.add(format!("{prefix}.attn.rel_pos_table"), trunc_normal(rng, &[span * span, spec.heads], INIT_STD))
        });
        let proj = Linear::register(store, &format!("{prefix}.attn.proj"), d, d, true, rng);
        let norm2 = LayerNorm::register(store, &format!("{prefix}.norm2"), d);
        let fc1 = Linear::register(store, &format!("{prefix}.mlp.fc1"), d, spec.mlp_hidden, true, rng);
        let fc2 = Linear::register(store, &format!("{prefix}.mlp.fc2"), spec.mlp_hidden, d, true, rng);
        Ok(SwinBlock { spec, norm1, qkv, proj, rel_table, norm2, fc1, fc2, cbam })
    }

    /// `[L, D]` tokens of an `h×w` grid → `[L, D]`.
    pub fn forward(&self, s: &mut Session, x: Var, (h, w): (usize, usize)) -> Result<Var> {
        let d = self.spec.dim;
        if s.tape.shape(x) != [h * w, d] {
            return Err(Error::shape("swin_block", format!("tokens {:?} for {h}×{w}×{d}", s.tape.shape(x))));
        }
        let shortcut = x;
        let mut y = self.norm1.forward(s, x)?;
        if let Some(cbam) = &self.cbam {
            let grid = s.tape.reshape(y, &[h, w, d])?;
            let chw = s.tape.permute(grid, &[2, 0, 1])?;
            let refined = cbam.forward(s, chw)?;
            let hwc = s.tape.permute(refined, &[1, 2, 0])?;
            y = s.tape.reshape(hwc, &[h * w, d])?;
        }
        let layout = WindowLayout::new(h, w, self.spec.window, self.spec.shift)?;
        let windows = layout.to_windows(&mut s.tape, y, d)?;
        let vars = MsaVars {
            qkv_w: s.p(self.qkv.w),
            qkv_b: self.qkv.b.map(|b| s.p(b)),
            proj_w: s.p(self.proj.w),
            proj_b: self.proj.b.map(|b| s.p(b)),
        };
        let bias = match self.rel_table {
            Some(t) => {
                let table = s.p(t);
                Some(relative_position_bias(&mut s.tape, table, self.spec.window)?)
            }
            None => None,
        };
        let attended = window_msa(&mut s.tape, windows, &vars, bias, layout.mask.as_ref(), self.spec.heads)?;
        let y = layout.from_windows(&mut s.tape, attended, d)?;
        let x = s.tape.add(shortcut, y)?;

        let y = self.norm2.forward(s, x)?;
        let y = self.fc1.forward(s, y)?;
        let y = s.tape.gelu(y)?;
        let y = self.fc2.forward(s, y)?;
        s.tape.add(x, y)
    }
}

/// A W-MSA block followed by an SW-MSA block.
pub fn block_pair_forward(s: &mut Session, x: Var, hw: (usize, usize), pair: &[SwinBlock; 2]) -> Result<Var> {
    let x = pair[0].forward(s, x, hw)?;
    pair[1].forward(s, x, hw)
}
