//! Procedural rail-surface images with exactly known defect boxes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, BBox, Category, Dataset, ImageBuf, Instance};
use crate::data::stats::SMALL_RATIO_THRESHOLD;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    /// Thin bright diagonal line.
    ScratchLine,
    /// Dark filled ellipse, squat-like; always small.
    DarkBlob,
    /// Dark horizontal bar across the rail.
    JointGapBar,
    /// Checkerboard texture overlay.
    TexturePatch,
}

impl DefectKind {
    pub const ALL: [DefectKind; 4] =
        [DefectKind::ScratchLine, DefectKind::DarkBlob, DefectKind::JointGapBar, DefectKind::TexturePatch];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::ScratchLine => "scratch-line",
            DefectKind::DarkBlob => "dark-blob",
            DefectKind::JointGapBar => "joint-gap-bar",
            DefectKind::TexturePatch => "texture-patch",
        }
    }

    pub fn always_small(self) -> bool {
        self == DefectKind::DarkBlob
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    pub num_images: usize,
    pub categories: Vec<DefectKind>,
    /// Inclusive range of instances drawn per image.
    pub instances_per_image: (usize, usize),
    /// Probability that an instance is drawn small (< 2% of the image).
    pub small_fraction: f64,
    /// Standard deviation of the additive Gaussian noise, in gray levels.
    pub noise_std: f64,
    pub seed: u64,
    /// All instances of an image share one kind, so the image has a single
    /// class label.
    pub single_kind_per_image: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 32,
            num_images: 100,
            categories: DefectKind::ALL.to_vec(),
            instances_per_image: (1, 3),
            small_fraction: 0.5,
            noise_std: 6.0,
            seed: 0,
            single_kind_per_image: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.image_size < 16 {
            return bad(format!("synthetic image size {} is below 16", self.image_size));
        }
        if self.num_images == 0 {
            return bad("synthetic dataset needs at least one image".into());
        }
        if self.categories.is_empty() {
            return bad("synthetic dataset needs at least one defect kind".into());
        }
        for (i, k) in self.categories.iter().enumerate() {
            if self.categories[..i].contains(k) {
                return bad(format!("defect kind {} listed twice", k.name()));
            }
        }
        let (lo, hi) = self.instances_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("instances per image range ({lo}, {hi}) must satisfy 1 ≤ min ≤ max"));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return bad(format!("small fraction {} outside [0, 1]", self.small_fraction));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise std {} must be finite and non-negative", self.noise_std));
        }
        Ok(())
    }

    /// Largest integer box area that is still small.
    fn small_area_limit(&self) -> usize {
        let total = (self.image_size * self.image_size) as f64;
        let limit = (SMALL_RATIO_THRESHOLD * total).ceil() as usize - 1;
        limit.max(1)
    }
}

struct Canvas {
    n: usize,
    v: Vec<f64>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, value: f64, drawn: &mut Vec<(usize, usize)>) {
        self.v[y * self.n + x] = value;
        drawn.push((x, y));
    }
}

/// Integer `(w, h)` with `w·h ≤ limit` drawn from the given ranges.
fn small_extent(rng: &mut ChaCha8Rng, limit: usize, w_range: (usize, usize), h_min: usize) -> (usize, usize) {
    let w = rng.random_range(w_range.0..=w_range.1).min(limit / h_min).max(1);
    let h_max = (limit / w).max(h_min);
    let h = rng.random_range(h_min..=h_max);
    (w, h)
}

fn draw(canvas: &mut Canvas, kind: DefectKind, small: bool, limit: usize, rng: &mut ChaCha8Rng, boxes: &[BBox]) -> Option<BBox> {
    let n = canvas.n;
    let (w, h) = match (kind, small) {
        (DefectKind::ScratchLine, true) => small_extent(rng, limit, (2, 5), 2),
        (DefectKind::ScratchLine, false) => (rng.random_range(n / 4..=n / 2), rng.random_range(n / 4..=n / 2)),
        (DefectKind::DarkBlob, _) => small_extent(rng, limit, (3, 5), 3),
        (DefectKind::JointGapBar, true) => small_extent(rng, limit, (4, 8), 2),
        (DefectKind::JointGapBar, false) => (rng.random_range(n / 2..=n * 9 / 10), rng.random_range(2..=3)),
        (DefectKind::TexturePatch, true) => small_extent(rng, limit, (3, 4), 3),
        (DefectKind::TexturePatch, false) => (rng.random_range(n / 5..=n / 3), rng.random_range(n / 5..=n / 3)),
    };
    let (w, h) = (w.min(n), h.min(n));
    // A few tries at a spot clear of earlier instances.
    let mut origin = None;
    for _ in 0..20 {
        let x0 = rng.random_range(0..=n - w);
        let y0 = rng.random_range(0..=n - h);
        let cand = BBox::new(x0 as f64, y0 as f64, w as f64, h as f64);
        if boxes.iter().all(|b| !overlaps(*b, cand)) {
            origin = Some((x0, y0));
            break;
        }
    }
    let (x0, y0) = origin?;
    let mut drawn = Vec::new();
    match kind {
        DefectKind::ScratchLine => {
            let flip = rng.random_bool(0.5);
            let steps = w.max(h);
            for k in 0..steps {
                let t = if steps == 1 { 0.0 } else { k as f64 / (steps - 1) as f64 };
                let dx = (t * (w - 1) as f64).round() as usize;
                let dy = (t * (h - 1) as f64).round() as usize;
                let x = if flip { x0 + w - 1 - dx } else { x0 + dx };
                canvas.put(x, y0 + dy, 215.0, &mut drawn);
            }
        }
        DefectKind::DarkBlob => {
            let (cx, cy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
            let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                    if u * u + v * v <= 1.0 {
                        canvas.put(x, y, 25.0, &mut drawn);
                    }
                }
            }
        }
        DefectKind::JointGapBar => {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    canvas.put(x, y, 35.0, &mut drawn);
                }
            }
        }
        DefectKind::TexturePatch => {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let sign = if ((x - x0) / 2 + (y - y0) / 2) % 2 == 0 { 1.0 } else { -1.0 };
                    let v = canvas.v[y * n + x] + 45.0 * sign;
                    canvas.put(x, y, v, &mut drawn);
                }
            }
        }
    }
    let xmin = drawn.iter().map(|p| p.0).min()?;
    let xmax = drawn.iter().map(|p| p.0).max()?;
    let ymin = drawn.iter().map(|p| p.1).min()?;
    let ymax = drawn.iter().map(|p| p.1).max()?;
    Some(BBox::new(xmin as f64, ymin as f64, (xmax - xmin + 1) as f64, (ymax - ymin + 1) as f64))
}

fn overlaps(a: BBox, b: BBox) -> bool {
    a.x < b.x2() && b.x < a.x2() && a.y < b.y2() && b.y < a.y2()
}

/// Gray images of a vertical rail band with noise and drawn defects.
/// Category ids are `1..=K` in `spec.categories` order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid noise std");
    let limit = spec.small_area_limit();
    let categories: Vec<Category> = spec
        .categories
        .iter()
        .enumerate()
        .map(|(i, k)| Category { id: i as u64 + 1, name: k.name().to_string() })
        .collect();
    let mut images = Vec::with_capacity(spec.num_images);
    for idx in 0..spec.num_images {
        let mut canvas = Canvas { n, v: vec![0.0; n * n] };
        let band = 0.3 * n as f64;
        for y in 0..n {
            for x in 0..n {
                let d = (x as f64 + 0.5 - n as f64 / 2.0) / band;
                canvas.v[y * n + x] = 70.0 + 80.0 * (-d * d).exp() + 10.0 * y as f64 / n as f64;
            }
        }
        let count = rng.random_range(spec.instances_per_image.0..=spec.instances_per_image.1);
        let image_kind = rng.random_range(0..spec.categories.len());
        let mut instances: Vec<Instance> = Vec::with_capacity(count);
        for _ in 0..count {
            let ki = if spec.single_kind_per_image { image_kind } else { rng.random_range(0..spec.categories.len()) };
            let kind = spec.categories[ki];
            let small = kind.always_small() || rng.random_bool(spec.small_fraction);
            let boxes: Vec<BBox> = instances.iter().map(|i| i.bbox).collect();
            if let Some(bbox) = draw(&mut canvas, kind, small, limit, &mut rng, &boxes) {
                instances.push(Instance { bbox, category_id: ki as u64 + 1 });
            }
        }
        let data = canvas
            .v
            .iter()
            .map(|&v| {
                let e = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (v + e).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        images.push(AnnotatedImage {
            id: idx as u64 + 1,
            file_name: format!("synthetic_{:05}.png", idx + 1),
            width: n,
            height: n,
            pixels: Some(ImageBuf::new(n, n, 1, data)?),
            instances,
        });
    }
    Ok(Dataset { images, categories })
}
