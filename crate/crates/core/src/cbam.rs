//! Convolutional block attention: a channel attention map computed from
//! pooled spatial descriptors through a shared two-layer MLP, a spatial
//! attention map computed by a 7×7 convolution over pooled channel
//! descriptors, and the multiplicative refinement that applies them.
//!
//! The shared MLP uses a ReLU between its two layers and has no biases.
//! CBAM adds no residual of its own; callers provide the shortcut.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamId, ParamStore, Session};
use crate::tensor::{PoolMode, Tape, Tensor, Var};

/// Spatial extent of the spatial-attention kernel.
pub const SPATIAL_KERNEL: usize = 7;
/// Zero padding that keeps the spatial-attention output the input's size.
pub const SPATIAL_PAD: usize = 3;

thread_local! {
    static REFINE_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`refine`] calls made on this thread since the last reset.
pub fn refine_invocations() -> usize {
    REFINE_CALLS.with(Cell::get)
}

pub fn reset_refine_invocations() {
    REFINE_CALLS.with(|c| c.set(0));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    ChannelOnly,
    SpatialOnly,
    Both,
}

/// Largest reduction not exceeding `requested` that divides `channels`.
pub fn effective_reduction(channels: usize, requested: usize) -> usize {
    (1..=requested.max(1).min(channels)).rev().find(|r| channels % r == 0).unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    /// First shared-MLP layer, `[C/r, C]`.
    pub w0: Tensor,
    /// Second shared-MLP layer, `[C, C/r]`.
    pub w1: Tensor,
}

impl ChannelAttentionParams {
    pub fn new(w0: Tensor, w1: Tensor) -> Result<Self> {
        check_mlp(w0.shape(), w1.shape())?;
        Ok(ChannelAttentionParams { w0, w1 })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(ChannelAttentionParams { w0: Tensor::zeros([hidden, channels]), w1: Tensor::zeros([channels, hidden]) })
    }

    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(ChannelAttentionParams {
            w0: fan_in_uniform(rng, &[hidden, channels], channels),
            w1: fan_in_uniform(rng, &[channels, hidden], hidden),
        })
    }

    pub fn channels(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn reduction(&self) -> usize {
        self.channels() / self.w0.shape()[0]
    }

    /// `M_c` for a `[C,H,W]` feature map, shape `[C,1,1]`.
    pub fn map(&self, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (fv, w0, w1) = (tape.constant(f.clone()), tape.constant(self.w0.clone()), tape.constant(self.w1.clone()));
        let m = channel_attention_map(&mut tape, fv, w0, w1)?;
        Ok(tape.value(m).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams {
    /// `[1, 2, 7, 7]`: one output map from the stacked avg/max descriptors.
    pub kernel: Tensor,
}

impl SpatialAttentionParams {
    pub fn new(kernel: Tensor) -> Result<Self> {
        check_spatial_kernel(kernel.shape())?;
        Ok(SpatialAttentionParams { kernel })
    }

    pub fn zeros() -> Self {
        SpatialAttentionParams { kernel: Tensor::zeros([1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]) }
    }

    pub fn init(rng: &mut impl Rng) -> Self {
        let shape = [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL];
        SpatialAttentionParams { kernel: fan_in_uniform(rng, &shape, 2 * SPATIAL_KERNEL * SPATIAL_KERNEL) }
    }

    /// `M_s` for a `[C,H,W]` feature map, shape `[1,H,W]`.
    pub fn map(&self, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (fv, k) = (tape.constant(f.clone()), tape.constant(self.kernel.clone()));
        let m = spatial_attention_map(&mut tape, fv, k)?;
        Ok(tape.value(m).clone())
    }
}

/// Channel and/or spatial attention maps with entries in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub m_c: Option<Tensor>,
    pub m_s: Option<Tensor>,
}

impl AttentionMaps {
    /// Applies the maps to `f` on a throwaway tape.
    pub fn refine(&self, f: &Tensor, mode: RefineMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let vars = MapVars {
            channel: self.m_c.clone().map(|m| tape.constant(m)),
            spatial: self.m_s.clone().map(|m| tape.constant(m)),
        };
        let out = refine(&mut tape, fv, &vars, mode)?;
        Ok(tape.value(out).clone())
    }
}

/// Attention maps recorded on a tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct MapVars {
    pub channel: Option<Var>,
    pub spatial: Option<Var>,
}

fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if channels == 0 || reduction == 0 || channels % reduction != 0 {
        return Err(Error::InvalidParam(format!("reduction {reduction} must divide channel count {channels}")));
    }
    Ok(channels / reduction)
}

fn check_mlp(w0: &[usize], w1: &[usize]) -> Result<(usize, usize)> {
    match (w0, w1) {
        ([h, c], [c2, h2]) if c == c2 && h == h2 && c % h == 0 => Ok((*c, *h)),
        _ => Err(Error::shape("channel_attention", format!("w0 {w0:?} / w1 {w1:?} are not [C/r,C] / [C,C/r]"))),
    }
}

fn check_spatial_kernel(k: &[usize]) -> Result<()> {
    if k != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] {
        return Err(Error::shape("spatial_attention", format!("kernel must be [1,2,7,7], got {k:?}")));
    }
    Ok(())
}

/// `M_c = σ(W1·relu(W0·avg) + W1·relu(W0·max))`, shape `[C,1,1]`.
pub fn channel_attention_map(tape: &mut Tape, f: Var, w0: Var, w1: Var) -> Result<Var> {
    let (c, _) = check_mlp(tape.shape(w0), tape.shape(w1))?;
    let fs = tape.shape(f);
    if fs.len() != 3 || fs[0] != c {
        return Err(Error::shape("channel_attention", format!("feature {fs:?} for {c} channels")));
    }
    let avg = tape.pool_spatial(f, PoolMode::Avg)?;
    let max = tape.pool_spatial(f, PoolMode::Max)?;
    // Both descriptors go through the same MLP as two rows of one batch.
    let avg = tape.reshape(avg, &[1, c])?;
    let max = tape.reshape(max, &[1, c])?;
    let rows = tape.concat(&[avg, max], 0)?;
    let hidden = tape.linear(rows, w0, None)?;
    let hidden = tape.relu(hidden)?;
    let out = tape.linear(hidden, w1, None)?;
    let summed = tape.sum_axis(out, 0)?;
    let logits = tape.reshape(summed, &[c, 1, 1])?;
    tape.sigmoid(logits)
}

/// `M_s = σ(conv7×7([avg_c(F); max_c(F)]))`, shape `[1,H,W]`.
pub fn spatial_attention_map(tape: &mut Tape, f: Var, kernel: Var) -> Result<Var> {
    check_spatial_kernel(tape.shape(kernel))?;
    if tape.shape(f).len() != 3 {
        return Err(Error::shape("spatial_attention", format!("feature {:?} is not [C,H,W]", tape.shape(f))));
    }
    let avg = tape.pool_channel(f, PoolMode::Avg)?;
    let max = tape.pool_channel(f, PoolMode::Max)?;
    let stacked = tape.concat(&[avg, max], 0)?;
    let logits = tape.conv2d(stacked, kernel, 1, SPATIAL_PAD)?;
    tape.sigmoid(logits)
}

/// Multiplies `f` by the selected maps; `Both` applies the channel map and
/// then the spatial map.
pub fn refine(tape: &mut Tape, f: Var, maps: &MapVars, mode: RefineMode) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    if fs.len() != 3 {
        return Err(Error::shape("refine", format!("feature {fs:?} is not [C,H,W]")));
    }
    let need = |m: Option<Var>, what: &str| m.ok_or_else(|| Error::InvalidParam(format!("refine needs the {what} map")));
    let check = |tape: &Tape, m: Var, want: [usize; 3]| {
        if tape.shape(m) != want {
            return Err(Error::shape("refine", format!("map {:?}, expected {want:?}", tape.shape(m))));
        }
        Ok(m)
    };
    let out = match mode {
        RefineMode::ChannelOnly => {
            let mc = check(tape, need(maps.channel, "channel")?, [fs[0], 1, 1])?;
            tape.mul(f, mc)?
        }
        RefineMode::SpatialOnly => {
            let ms = check(tape, need(maps.spatial, "spatial")?, [1, fs[1], fs[2]])?;
            tape.mul(f, ms)?
        }
        RefineMode::Both => {
            let mc = check(tape, need(maps.channel, "channel")?, [fs[0], 1, 1])?;
            let ms = check(tape, need(maps.spatial, "spatial")?, [1, fs[1], fs[2]])?;
            let fc = tape.mul(f, mc)?;
            tape.mul(fc, ms)?
        }
    };
    REFINE_CALLS.with(|c| c.set(c.get() + 1));
    Ok(out)
}

/// CBAM parameters registered in a [`ParamStore`]. Either half may be
/// absent: block-level insertion uses only the channel half before W-MSA
/// and only the spatial half before SW-MSA.
#[derive(Clone, Debug, PartialEq)]
pub struct Cbam {
    pub channel: Option<(ParamId, ParamId)>,
    pub spatial: Option<ParamId>,
}

impl Cbam {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        mode: RefineMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let channel = if mode != RefineMode::SpatialOnly {
            let p = ChannelAttentionParams::init(channels, reduction, rng)?;
            Some((store.add(format!("{prefix}.cam.w0"), p.w0), store.add(format!("{prefix}.cam.w1"), p.w1)))
        } else {
            None
        };
        let spatial = if mode != RefineMode::ChannelOnly {
            Some(store.add(format!("{prefix}.sam.kernel"), SpatialAttentionParams::init(rng).kernel))
        } else {
            None
        };
        Ok(Cbam { channel, spatial })
    }

    pub fn mode(&self) -> RefineMode {
        match (self.channel.is_some(), self.spatial.is_some()) {
            (true, true) => RefineMode::Both,
            (true, false) => RefineMode::ChannelOnly,
            _ => RefineMode::SpatialOnly,
        }
    }

    /// Computes the maps for `f` (`[C,H,W]`) and applies them.
    pub fn forward(&self, s: &mut Session, f: Var) -> Result<Var> {
        let channel = match self.channel {
            Some((w0, w1)) => {
                let (w0, w1) = (s.p(w0), s.p(w1));
                Some(channel_attention_map(&mut s.tape, f, w0, w1)?)
            }
            None => None,
        };
        let spatial = match self.spatial {
            Some(k) => {
                let k = s.p(k);
                Some(spatial_attention_map(&mut s.tape, f, k)?)
            }
            None => None,
        };
        refine(&mut s.tape, f, &MapVars { channel, spatial }, self.mode())
    }
}
