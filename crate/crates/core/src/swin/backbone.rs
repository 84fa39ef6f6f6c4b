use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{BlockSpec, SwinBlock};
use super::config::{Placement, SwinConfig, IMAGE_CHANNELS};
use crate::cbam::{Cbam, RefineMode};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamStore, Session};
use crate::tensor::{Tape, Tensor, Var};

/// `[C, H, W]` image → `[(H/p)·(W/p), C·p²]` patches, each flattened in
/// (channel, row, column) order.
pub fn patch_partition_map(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut map = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for ky in 0..p {
                    for kx in 0..p {
                        map.push((ch * h + py * p + ky) * w + px * p + kx);
                    }
                }
            }
        }
    }
    map
}

pub fn patch_partition(tape: &mut Tape, image: Var, p: usize) -> Result<Var> {
    let (c, h, w) = match *tape.shape(image) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("patch_partition", format!("expected [C,H,W], got {s:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::IndivisibleInput(format!("{h}×{w} image with patch size {p}")));
    }
    let shape = [(h / p) * (w / p), c * p * p];
    tape.reindex(image, &shape, Arc::from(patch_partition_map(c, h, w, p)))
}

/// `[H, W, D]` → `[H/2, W/2, 4D]`, concatenating the 2×2 neighbourhood as
/// (top-left, bottom-left, top-right, bottom-right).
pub fn merge_map(h: usize, w: usize, d: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(h * w * d);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let base = ((2 * y + dy) * w + 2 * x + dx) * d;
                map.extend(base..base + d);
            }
        }
    }
    map
}

/// Applies a CBAM to `[L, D]` tokens of an `h×w` grid by viewing them as a
/// `[D, h, w]` feature map.
fn cbam_on_tokens(s: &mut Session, cbam: &Cbam, x: Var, h: usize, w: usize) -> Result<Var> {
    let d = s.tape.shape(x)[1];
    let grid = s.tape.reshape(x, &[h, w, d])?;
    let chw = s.tape.permute(grid, &[2, 0, 1])?;
    let refined = cbam.forward(s, chw)?;
    let hwc = s.tape.permute(refined, &[1, 2, 0])?;
    s.tape.reshape(hwc, &[h * w, d])
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchMerging {
    /// Stage-level CBAM over the concatenated `4D` neighbourhoods.
    pub cbam: Option<Cbam>,
    pub norm: LayerNorm,
    /// `4D → 2D`, no bias.
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        cbam_reduction: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cbam = match cbam_reduction {
            Some(r) => Some(Cbam::register(store, &format!("{prefix}.cbam"), 4 * dim, r, RefineMode::Both, rng)?),
            None => None,
        };
        let norm = LayerNorm::register(store, &format!("{prefix}.norm"), 4 * dim);
        let reduction = Linear::register(store, &format!("{prefix}.reduction"), 4 * dim, 2 * dim, false, rng);
        Ok(PatchMerging { cbam, norm, reduction })
    }

    /// `[h·w, D]` → `[(h/2)·(w/2), 2D]`.
    pub fn forward(&self, s: &mut Session, x: Var, (h, w): (usize, usize)) -> Result<Var> {
        let d = match *s.tape.shape(x) {
            [l, d] if l == h * w => d,
            ref sh => return Err(Error::shape("patch_merging", format!("tokens {sh:?} for {h}×{w}"))),
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::IndivisibleInput(format!("patch merging needs even extents, got {h}×{w}")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let mut y = s.tape.reindex(x, &[h2 * w2, 4 * d], Arc::from(merge_map(h, w, d)))?;
        if let Some(cbam) = &self.cbam {
            y = cbam_on_tokens(s, cbam, y, h2, w2)?;
        }
        let y = self.norm.forward(s, y)?;
        self.reduction.forward(s, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    /// Merging into the next stage; absent on the last stage.
    pub downsample: Option<PatchMerging>,
}

/// Four-stage hierarchical backbone returning one feature map per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SwinBackbone {
    pub cfg: SwinConfig,
    /// Model-level CBAM on the raw image.
    pub image_cbam: Option<Cbam>,
    /// Stage-level CBAM on the partitioned patches before the embedding.
    pub stem_cbam: Option<Cbam>,
    pub embed: Linear,
    pub stages: Vec<Stage>,
    pub out_norms: Vec<LayerNorm>,
}

impl SwinBackbone {
    /// Registers all parameters in `store`, initialized from `cfg.seed`.
    pub fn build(cfg: &SwinConfig, store: &mut ParamStore) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::build_with_rng(cfg, store, &mut rng)
    }

    pub fn build_with_rng(cfg: &SwinConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let patch_dim = IMAGE_CHANNELS * p * p;
        let image_cbam = match cfg.placement {
            Placement::ModelLevel => Some(Cbam::register(
                store,
                "image_cbam",
                IMAGE_CHANNELS,
                cfg.reduction_for(IMAGE_CHANNELS),
                RefineMode::Both,
                rng,
            )?),
            _ => None,
        };
        let stage_level = cfg.placement == Placement::StageLevel;
        let stem_cbam = if stage_level {
            Some(Cbam::register(store, "stem_cbam", patch_dim, cfg.reduction_for(patch_dim), RefineMode::Both, rng)?)
        } else {
            None
        };
        let embed = Linear::register(store, "patch_embed", patch_dim, cfg.embed_dim, true, rng);

        let mut stages = Vec::with_capacity(4);
        for si in 0..4 {
            let dim = cfg.stage_dim(si);
            let mut blocks = Vec::with_capacity(cfg.depths[si]);
            for bi in 0..cfg.depths[si] {
                let shifted = bi % 2 == 1;
                let cbam = (cfg.placement == Placement::BlockLevel).then(|| {
                    let mode = if shifted { RefineMode::SpatialOnly } else { RefineMode::ChannelOnly };
                    (mode, cfg.reduction_for(dim))
                });
                let spec = BlockSpec {
                    dim,
                    heads: cfg.num_heads[si],
                    window: cfg.window_size,
                    shift: if shifted { cfg.window_size / 2 } else { 0 },
                    mlp_hidden: cfg.mlp_hidden(dim),
                    rel_pos_bias: cfg.rel_pos_bias,
                    cbam,
                };
                blocks.push(SwinBlock::register(store, &format!("stages.{si}.blocks.{bi}"), spec, rng)?);
            }
            let downsample = if si < 3 {
                let r = stage_level.then(|| cfg.reduction_for(4 * dim));
                Some(PatchMerging::register(store, &format!("stages.{si}.downsample"), dim, r, rng)?)
            } else {
                None
            };
            stages.push(Stage { blocks, downsample });
        }
        let out_norms = (0..4).map(|si| LayerNorm::register(store, &format!("norm{si}"), cfg.stage_dim(si))).collect();
        Ok(SwinBackbone { cfg: cfg.clone(), image_cbam, stem_cbam, embed, stages, out_norms })
    }

    /// `[3, H, W]` image → four maps `[C·2^s, H/4/2^s, W/4/2^s]`.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Vec<Var>> {
        let cfg = &self.cfg;
        let expect = [IMAGE_CHANNELS, cfg.input_size[0], cfg.input_size[1]];
        let got = s.tape.shape(image).to_vec();
        if got.len() == 3 && got[0] == IMAGE_CHANNELS && (got[1] % cfg.patch_size != 0 || got[2] % cfg.patch_size != 0) {
            return Err(Error::IndivisibleInput(format!(
                "image {}×{} with patch size {}",
                got[1], got[2], cfg.patch_size
            )));
        }
        if got != expect {
            return Err(Error::shape("backbone", format!("image {got:?}, config expects {expect:?}")));
        }
        let mut img = image;
        if let Some(cbam) = &self.image_cbam {
            img = cbam.forward(s, img)?;
        }
        let (mut h, mut w) = cfg.stage_extent(0);
        let mut x = patch_partition(&mut s.tape, img, cfg.patch_size)?;
        if let Some(cbam) = &self.stem_cbam {
            x = cbam_on_tokens(s, cbam, x, h, w)?;
        }
        x = self.embed.forward(s, x)?;

        let mut outs = Vec::with_capacity(4);
        for (si, stage) in self.stages.iter().enumerate() {
            for block in &stage.blocks {
                x = block.forward(s, x, (h, w))?;
            }
            let d = cfg.stage_dim(si);
            let normed = self.out_norms[si].forward(s, x)?;
            let grid = s.tape.reshape(normed, &[h, w, d])?;
            outs.push(s.tape.permute(grid, &[2, 0, 1])?);
            if let Some(ds) = &stage.downsample {
                x = ds.forward(s, x, (h, w))?;
                (h, w) = (h / 2, w / 2);
            }
        }
        Ok(outs)
    }

    /// Inference on a plain tensor.
    pub fn forward_tensor(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut s = Session::new(store, false);
        let img = s.tape.constant(image.clone());
        let outs = self.forward(&mut s, img)?;
        Ok(outs.into_iter().map(|v| s.tape.value(v).clone()).collect())
    }
}
