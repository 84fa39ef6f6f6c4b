//! Task heads on top of the backbone: image classification from the last
//! stage, and a one-box-per-cell localization head on the third stage.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::metrics::Detection;
use crate::nn::Linear;
use crate::params::{ParamStore, Session};
use crate::tensor::{sigmoid, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    Localization,
}

/// Smooth-L1 transition point of the box regression loss.
pub const BOX_LOSS_BETA: f64 = 1.0;
/// Per-cell outputs ahead of the class scores: objectness and 4 offsets.
pub const LOC_FIXED: usize = 5;

/// Global average pool of `[C, H, W]` to a `[1, C]` row.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("global_avg_pool", format!("expected [C, H, W], got {shape:?}")));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let flat = tape.reshape(x, &[c, hw])?;
    let summed = tape.sum_axis(flat, 1)?;
    let mean = tape.scale(summed, 1.0 / hw as f64)?;
    tape.reshape(mean, &[1, c])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationHead {
    pub fc: Linear,
}

impl ClassificationHead {
    pub fn register(store: &mut ParamStore, in_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        ClassificationHead { fc: Linear::register(store, "head.fc", in_dim, num_classes, true, rng) }
    }

    /// Stage-4 maps of a batch → `[B, K]` logits.
    pub fn forward(&self, s: &mut Session, features: &[Var]) -> Result<Var> {
        let rows = features.iter().map(|&f| global_avg_pool(&mut s.tape, f)).collect::<Result<Vec<_>>>()?;
        let pooled = s.tape.concat(&rows, 0)?;
        self.fc.forward(s, pooled)
    }
}

/// Per-image regression targets on an `h × w` cell grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LocTargets {
    pub objectness: Vec<f64>,
    pub offsets: Vec<f64>,
    pub offset_weights: Vec<f64>,
    /// `(cell, class)` of every positive cell.
    pub positives: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_w: f64,
    pub cell_h: f64,
}

impl CellGrid {
    pub fn new(rows: usize, cols: usize, image_w: f64, image_h: f64) -> Self {
        CellGrid { rows, cols, cell_w: image_w / cols as f64, cell_h: image_h / rows as f64 }
    }

    fn centre(&self, cell: usize) -> (f64, f64) {
        let (r, c) = (cell / self.cols, cell % self.cols);
        ((c as f64 + 0.5) * self.cell_w, (r as f64 + 0.5) * self.cell_h)
    }

    /// Encodes each box into the cell holding its centre; when two boxes
    /// share a cell the larger one wins.
    pub fn encode(&self, boxes: &[(BBox, usize)]) -> LocTargets {
        let cells = self.rows * self.cols;
        let mut owner: Vec<Option<(BBox, usize)>> = vec![None; cells];
        for &(b, class) in boxes {
            let (cx, cy) = (b.x + b.w / 2.0, b.y + b.h / 2.0);
            let col = ((cx / self.cell_w).floor() as usize).min(self.cols - 1);
            let row = ((cy / self.cell_h).floor() as usize).min(self.rows - 1);
            let slot = &mut owner[row * self.cols + col];
            if slot.is_none_or(|(o, _)| b.area() > o.area()) {
                *slot = Some((b, class));
            }
        }
        let mut t = LocTargets {
            objectness: vec![0.0; cells],
            offsets: vec![0.0; cells * 4],
            offset_weights: vec![0.0; cells * 4],
            positives: Vec::new(),
        };
        for (cell, o) in owner.into_iter().enumerate() {
            let Some((b, class)) = o else { continue };
            let (gx, gy) = self.centre(cell);
            t.objectness[cell] = 1.0;
            let enc = [
                (b.x + b.w / 2.0 - gx) / self.cell_w,
                (b.y + b.h / 2.0 - gy) / self.cell_h,
                (b.w.max(1e-3) / self.cell_w).ln(),
                (b.h.max(1e-3) / self.cell_h).ln(),
            ];
            t.offsets[cell * 4..cell * 4 + 4].copy_from_slice(&enc);
            t.offset_weights[cell * 4..cell * 4 + 4].fill(1.0);
            t.positives.push((cell, class));
        }
        t
    }

    /// Inverse of [`CellGrid::encode`] for one cell, clamped to the image.
    pub fn decode(&self, cell: usize, off: &[f64], image_w: f64, image_h: f64) -> BBox {
        let (gx, gy) = self.centre(cell);
        let cx = gx + off[0] * self.cell_w;
        let cy = gy + off[1] * self.cell_h;
        let w = self.cell_w * off[2].clamp(-10.0, 10.0).exp();
        let h = self.cell_h * off[3].clamp(-10.0, 10.0).exp();
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h).clamp(image_w, image_h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationHead {
    /// 1×1 convolution as a per-cell linear map `C → 5 + K`.
    pub conv: Linear,
    pub num_classes: usize,
}

/// Gathers columns `cols` of a `[rows, width]` matrix, restricted to `rows_sel`.
fn gather(tape: &mut Tape, x: Var, rows_sel: &[usize], cols: std::ops::Range<usize>) -> Result<Var> {
    let width = tape.shape(x)[1];
    let n = cols.len();
    let map: Vec<usize> = rows_sel.iter().flat_map(|&r| cols.clone().map(move |c| r * width + c)).collect();
    tape.reindex(x, &[rows_sel.len(), n], Arc::from(map))
}

impl LocalizationHead {
    pub fn register(store: &mut ParamStore, in_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let conv = Linear::register(store, "head.conv", in_dim, LOC_FIXED + num_classes, true, rng);
        LocalizationHead { conv, num_classes }
    }

    /// Stage-3 map `[C, h, w]` → `[h·w, 5 + K]` cell outputs.
    pub fn forward(&self, s: &mut Session, feature: Var) -> Result<Var> {
        let shape = s.tape.shape(feature).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("LocalizationHead", format!("expected [C, H, W], got {shape:?}")));
        }
        let hwc = s.tape.permute(feature, &[1, 2, 0])?;
        let tokens = s.tape.reshape(hwc, &[shape[1] * shape[2], shape[0]])?;
        self.conv.forward(s, tokens)
    }

    /// Objectness BCE over all cells, plus class cross-entropy and
    /// smooth-L1 offsets over positive cells (normalized by their count).
    pub fn loss(&self, tape: &mut Tape, out: Var, t: &LocTargets) -> Result<Var> {
        let cells = tape.shape(out)[0];
        let all: Vec<usize> = (0..cells).collect();
        let obj = gather(tape, out, &all, 0..1)?;
        let obj = tape.reshape(obj, &[cells])?;
        let mut loss = tape.bce_with_logits(obj, &t.objectness)?;
        if !t.positives.is_empty() {
            let npos = t.positives.len() as f64;
            let off = gather(tape, out, &all, 1..LOC_FIXED)?;
            let off = tape.reshape(off, &[cells * 4])?;
            let l1 = tape.smooth_l1(off, &t.offsets, &t.offset_weights, BOX_LOSS_BETA)?;
            let l1 = tape.scale(l1, 1.0 / npos)?;
            loss = tape.add(loss, l1)?;
            let rows: Vec<usize> = t.positives.iter().map(|p| p.0).collect();
            let classes: Vec<usize> = t.positives.iter().map(|p| p.1).collect();
            let logits = gather(tape, out, &rows, LOC_FIXED..LOC_FIXED + self.num_classes)?;
            let ce = tape.cross_entropy(logits, &classes)?;
            loss = tape.add(loss, ce)?;
        }
        Ok(loss)
    }
}

/// Turns `[cells, 5 + K]` outputs into one detection per cell, scored as
/// objectness × best class probability. `category_ids[k]` names class `k`.
pub fn decode_detections(
    out: &[f64],
    grid: &CellGrid,
    category_ids: &[u64],
    image_id: u64,
    image_w: f64,
    image_h: f64,
) -> Vec<Detection> {
    let k = category_ids.len();
    let width = LOC_FIXED + k;
    let mut dets = Vec::with_capacity(grid.rows * grid.cols);
    for cell in 0..grid.rows * grid.cols {
        let row = &out[cell * width..(cell + 1) * width];
        let logits = &row[LOC_FIXED..];
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let (best, &best_logit) =
            logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).expect("classes");
        let p = (best_logit - mx).exp() / z;
        let score = (sigmoid(row[0]) * p).clamp(0.0, 1.0);
        let bbox = grid.decode(cell, &row[1..LOC_FIXED], image_w, image_h);
        if bbox.area() > 0.0 {
            dets.push(Detection { image_id, category_id: category_ids[best], bbox, score });
        }
    }
    dets
}
