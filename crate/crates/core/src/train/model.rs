//! Backbone plus task head, and conversion of annotated images into model
//! inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::head::{decode_detections, CellGrid, ClassificationHead, LocTargets, LocalizationHead, Task};
use crate::data::{BBox, Dataset};
use crate::error::{Error, Result};
use crate::metrics::Detection;
use crate::params::{ParamStore, Session};
use crate::swin::{SwinBackbone, SwinConfig};
use crate::tensor::{Tensor, Var};

/// Stage whose map feeds the localization head.
pub const LOC_STAGE: usize = 2;

/// One image resized to the model input, with its labels in input
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub input: Tensor,
    /// Class index of the largest instance.
    pub label: Option<usize>,
    pub boxes: Vec<(BBox, usize)>,
    /// Original image size `(W, H)`.
    pub original: (usize, usize),
}

impl Sample {
    /// Factors mapping input coordinates back to the original image.
    pub fn scale(&self) -> (f64, f64) {
        let [_, h, w] = [self.input.shape()[0], self.input.shape()[1], self.input.shape()[2]];
        (self.original.0 as f64 / w as f64, self.original.1 as f64 / h as f64)
    }
}

/// Class `k` is the `k`-th entry of the category table.
pub fn prepare_samples(ds: &Dataset, input_size: [usize; 2]) -> Result<Vec<Sample>> {
    let [ih, iw] = input_size;
    let class_of = |id: u64| ds.categories.iter().position(|c| c.id == id);
    ds.images
        .iter()
        .map(|img| {
            let px = img
                .pixels
                .as_ref()
                .ok_or_else(|| Error::InvalidParam(format!("image {} has no pixels loaded", img.id)))?;
            let input = px.resize(iw, ih).to_tensor();
            let (sx, sy) = (iw as f64 / img.width as f64, ih as f64 / img.height as f64);
            let boxes: Vec<(BBox, usize)> = img
                .instances
                .iter()
                .filter_map(|i| {
                    let b = BBox::new(i.bbox.x * sx, i.bbox.y * sy, i.bbox.w * sx, i.bbox.h * sy);
                    class_of(i.category_id).map(|k| (b, k))
                })
                .collect();
            let label = boxes.iter().max_by(|a, b| a.0.area().total_cmp(&b.0.area())).map(|b| b.1);
            Ok(Sample { image_id: img.id, input, label, boxes, original: (img.width, img.height) })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Classification(ClassificationHead),
    Localization(LocalizationHead),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: SwinBackbone,
    pub head: Head,
    /// Category id of every class index.
    pub category_ids: Vec<u64>,
}

impl Model {
    /// Registers backbone and head parameters, all drawn from `cfg.seed`.
    pub fn build(cfg: &SwinConfig, task: Task, category_ids: Vec<u64>, store: &mut ParamStore) -> Result<Self> {
        if category_ids.is_empty() {
            return Err(Error::InvalidParam("model needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = SwinBackbone::build_with_rng(cfg, store, &mut rng)?;
        let k = category_ids.len();
        let head = match task {
            Task::Classification => Head::Classification(ClassificationHead::register(store, cfg.stage_dim(3), k, &mut rng)),
            Task::Localization => {
                Head::Localization(LocalizationHead::register(store, cfg.stage_dim(LOC_STAGE), k, &mut rng))
            }
        };
        Ok(Model { backbone, head, category_ids })
    }

    pub fn task(&self) -> Task {
        match self.head {
            Head::Classification(_) => Task::Classification,
            Head::Localization(_) => Task::Localization,
        }
    }

    fn grid(&self) -> CellGrid {
        let cfg = &self.backbone.cfg;
        let (h, w) = cfg.stage_extent(LOC_STAGE);
        CellGrid::new(h, w, cfg.input_size[1] as f64, cfg.input_size[0] as f64)
    }

    /// Localization targets of a sample on the head's cell grid.
    pub fn loc_targets(&self, sample: &Sample) -> LocTargets {
        self.grid().encode(&sample.boxes)
    }

    /// Mean loss over the batch.
    pub fn loss(&self, s: &mut Session, batch: &[&Sample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        match &self.head {
            Head::Classification(head) => {
                let mut feats = Vec::with_capacity(batch.len());
                let mut labels = Vec::with_capacity(batch.len());
                for sample in batch {
                    let label = sample
                        .label
                        .ok_or_else(|| Error::InvalidParam(format!("image {} has no class label", sample.image_id)))?;
                    let x = s.tape.constant(sample.input.clone());
                    let maps = self.backbone.forward(s, x)?;
                    feats.push(maps[3]);
                    labels.push(label);
                }
                let logits = head.forward(s, &feats)?;
                s.tape.cross_entropy(logits, &labels)
            }
            Head::Localization(head) => {
                let mut total: Option<Var> = None;
                for sample in batch {
                    let x = s.tape.constant(sample.input.clone());
                    let maps = self.backbone.forward(s, x)?;
                    let out = head.forward(s, maps[LOC_STAGE])?;
                    let l = head.loss(&mut s.tape, out, &self.loc_targets(sample))?;
                    total = Some(match total {
                        Some(t) => s.tape.add(t, l)?,
                        None => l,
                    });
                }
                let sum = total.expect("non-empty batch");
                s.tape.scale(sum, 1.0 / batch.len() as f64)
            }
        }
    }

    /// Class logits of one sample (classification head only).
    pub fn logits(&self, store: &ParamStore, sample: &Sample) -> Result<Vec<f64>> {
        let Head::Classification(head) = &self.head else {
            return Err(Error::InvalidParam("logits need a classification head".into()));
        };
        let mut s = Session::new(store, false);
        let x = s.tape.constant(sample.input.clone());
        let maps = self.backbone.forward(&mut s, x)?;
        let out = head.forward(&mut s, &[maps[3]])?;
        Ok(s.tape.value(out).data().to_vec())
    }

    /// Detections in original image coordinates (localization head only).
    pub fn detect(&self, store: &ParamStore, sample: &Sample) -> Result<Vec<Detection>> {
        let Head::Localization(head) = &self.head else {
            return Err(Error::InvalidParam("detection needs a localization head".into()));
        };
        let mut s = Session::new(store, false);
        let x = s.tape.constant(sample.input.clone());
        let maps = self.backbone.forward(&mut s, x)?;
        let out = head.forward(&mut s, maps[LOC_STAGE])?;
        let cfg = &self.backbone.cfg;
        let (iw, ih) = (cfg.input_size[1] as f64, cfg.input_size[0] as f64);
        let (sx, sy) = sample.scale();
        let dets = decode_detections(s.tape.value(out).data(), &self.grid(), &self.category_ids, sample.image_id, iw, ih);
        Ok(dets
            .into_iter()
            .map(|d| Detection {
                bbox: BBox::new(d.bbox.x * sx, d.bbox.y * sy, d.bbox.w * sx, d.bbox.h * sy),
                ..d
            })
            .collect())
    }
}
