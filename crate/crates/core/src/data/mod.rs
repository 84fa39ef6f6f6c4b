//! Annotated image datasets: COCO ingestion, size statistics, geometric
//! augmentation, intensity enhancement, class balancing and splitting.

pub mod augment;
pub mod coco;
pub mod enhance;
pub mod io;
pub mod planner;
pub mod split;
pub mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, Transform};
pub use coco::{load_coco, parse_coco, save_coco, to_coco_json};
pub use enhance::{enhance, EnhanceMethod, EnhanceParams};
pub use planner::{execute_plan, plan_and_execute, plan_augmentation, AugmentPlan, SplitTargets, SynthRecord};
pub use split::split_train_val;
pub use stats::{category_stats, classify_small, CategoryStats, SizeClass};

/// Axis-aligned box in pixel units; `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_xywh(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_xywh(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Box spanning two corners given in any order.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox::new(x0.min(x1), y0.min(y1), (x1 - x0).abs(), (y1 - y0).abs())
    }

    pub fn x2(self) -> f64 {
        self.x + self.w
    }

    pub fn y2(self) -> f64 {
        self.y + self.h
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn corners(self) -> [(f64, f64); 4] {
        [(self.x, self.y), (self.x2(), self.y), (self.x, self.y2()), (self.x2(), self.y2())]
    }

    pub fn is_valid(self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    /// Intersection with the `[0, width] × [0, height]` image region.
    pub fn clamp(self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.x2().clamp(0.0, width);
        let y1 = self.y2().clamp(0.0, height);
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// True when the box overlaps the image region with positive area.
    pub fn intersects_image(self, width: f64, height: f64) -> bool {
        self.clamp(width, height).area() > 0.0
    }
}

/// 8-bit image with interleaved channels (1 = gray, 3 = RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::InvalidParam(format!("image {width}×{height} with {channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidParam(format!(
                "image {width}×{height}×{channels} needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(ImageBuf { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        ImageBuf { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Per-pixel intensity: the value itself for gray images, the channel
    /// mean for colour images.
    pub fn intensity(&self) -> Vec<f64> {
        self.data
            .chunks(self.channels)
            .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / self.channels as f64)
            .collect()
    }

    /// Bilinear resize to `width × height`.
    pub fn resize(&self, width: usize, height: usize) -> ImageBuf {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = ImageBuf::filled(width, height, self.channels, 0);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                for c in 0..self.channels {
                    let v = bilinear(self, fx, fy, c).unwrap_or(0.0);
                    out.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// `[3, H, W]` tensor scaled to [−1, 1]; gray images are replicated.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn([3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            let ch = if self.channels == 1 { 0 } else { c };
            self.data[p * self.channels + ch] as f64 / 127.5 - 1.0
        })
    }
}

/// Bilinear sample at continuous index coordinates; `None` outside the
/// pixel-centre lattice.
pub(crate) fn bilinear(img: &ImageBuf, fx: f64, fy: f64, c: usize) -> Option<f64> {
    let (w, h) = (img.width as f64, img.height as f64);
    if !(fx > -1.0 && fy > -1.0 && fx < w && fy < h) {
        return None;
    }
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let tap = |x: f64, y: f64| -> f64 {
        if x < 0.0 || y < 0.0 || x >= w || y >= h {
            0.0
        } else {
            img.get(x as usize, y as usize, c) as f64
        }
    };
    let top = tap(x0, y0) * (1.0 - ax) + tap(x0 + 1.0, y0) * ax;
    let bottom = tap(x0, y0 + 1.0) * (1.0 - ax) + tap(x0 + 1.0, y0 + 1.0) * ax;
    Some(top * (1.0 - ay) + bottom * ay)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BBox,
    pub category_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    /// Absent when only annotations were loaded.
    pub pixels: Option<ImageBuf>,
    pub instances: Vec<Instance>,
}

impl AnnotatedImage {
    pub fn channels(&self) -> Option<usize> {
        self.pixels.as_ref().map(|p| p.channels)
    }

    pub fn has_category(&self, category_id: u64) -> bool {
        self.instances.iter().any(|i| i.category_id == category_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<AnnotatedImage>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn category(&self, id: u64) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn num_instances(&self) -> usize {
        self.images.iter().map(|i| i.instances.len()).sum()
    }

    /// Number of images holding at least one instance of `category_id`.
    pub fn images_with(&self, category_id: u64) -> usize {
        self.images.iter().filter(|i| i.has_category(category_id)).count()
    }

    pub fn next_image_id(&self) -> u64 {
        self.images.iter().map(|i| i.id + 1).max().unwrap_or(1)
    }
}
