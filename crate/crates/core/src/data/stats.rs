//! Per-category box size statistics and the small-instance rule.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::Result;

/// A category is small when its mean box covers less than this fraction of
/// the image area.
pub const SMALL_RATIO_THRESHOLD: f64 = 0.02;

/// COCO's absolute area bounds, in px², for small and medium objects.
pub const COCO_SMALL_AREA: f64 = 32.0 * 32.0;
pub const COCO_MEDIUM_AREA: f64 = 96.0 * 96.0;
/// Reference image area (640×480) used to express the COCO bounds as
/// ratios.
pub const COCO_REFERENCE_AREA: f64 = 640.0 * 480.0;
/// 32² / (640·480) ≈ 0.3%.
pub const COCO_SMALL_RATIO: f64 = COCO_SMALL_AREA / COCO_REFERENCE_AREA;
/// 96² / (640·480) = 3%.
pub const COCO_MEDIUM_RATIO: f64 = COCO_MEDIUM_AREA / COCO_REFERENCE_AREA;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Regular,
}

impl SizeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Regular => "regular",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category_id: u64,
    pub name: String,
    pub instance_count: usize,
    /// Mean of `w·h` in px².
    pub mean_area_px: f64,
    pub mean_w: f64,
    pub mean_h: f64,
    /// Mean of `w·h / (W·H)` over instances.
    pub mean_size_ratio: f64,
    pub size_class: SizeClass,
}

pub fn classify_small(mean_size_ratio: f64) -> SizeClass {
    if mean_size_ratio < SMALL_RATIO_THRESHOLD {
        SizeClass::Small
    } else {
        SizeClass::Regular
    }
}

/// Statistics for every category with at least one instance, in category
/// table order. Empty categories are skipped with a warning.
pub fn category_stats(ds: &Dataset) -> Vec<CategoryStats> {
    let mut out = Vec::new();
    for cat in &ds.categories {
        let (mut n, mut area, mut w, mut h, mut ratio) = (0usize, 0.0, 0.0, 0.0, 0.0);
        for img in &ds.images {
            let img_area = (img.width * img.height) as f64;
            for inst in img.instances.iter().filter(|i| i.category_id == cat.id) {
                let a = inst.bbox.w * inst.bbox.h;
                n += 1;
                area += a;
                w += inst.bbox.w;
                h += inst.bbox.h;
                ratio += a / img_area;
            }
        }
        if n == 0 {
            log::warn!("category {} ({}) has no instances; skipped", cat.id, cat.name);
            continue;
        }
        let k = n as f64;
        let mean_size_ratio = ratio / k;
        out.push(CategoryStats {
            category_id: cat.id,
            name: cat.name.clone(),
            instance_count: n,
            mean_area_px: area / k,
            mean_w: w / k,
            mean_h: h / k,
            mean_size_ratio,
            size_class: classify_small(mean_size_ratio),
        });
    }
    out
}

pub const STATS_CSV_HEADER: [&str; 7] =
    ["category", "count", "mean_w", "mean_h", "mean_area_px", "mean_size_ratio", "size_class"];

pub fn write_stats_csv<W: Write>(stats: &[CategoryStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STATS_CSV_HEADER)?;
    for s in stats {
        w.write_record([
            s.name.clone(),
            s.instance_count.to_string(),
            s.mean_w.to_string(),
            s.mean_h.to_string(),
            s.mean_area_px.to_string(),
            s.mean_size_ratio.to_string(),
            s.size_class.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
