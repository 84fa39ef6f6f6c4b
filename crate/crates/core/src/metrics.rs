//! COCO-style detection metrics: IoU, greedy matching, 101-point
//! interpolated AP, AR with a per-image detection cap, macro-averaged over
//! categories, and a per-category report ordered by object size.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Category, CategoryStats, Dataset};
use crate::error::{Error, Result};

/// IoU thresholds of the two reported AP columns; AR averages over the same
/// set.
pub const IOU_THRESHOLDS: [f64; 2] = [0.5, 0.75];
pub const MAX_DETS: usize = 100;
/// Recall grid `0.00, 0.01, …, 1.00`.
pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
}

/// Ground truth of every instance in `ds`.
pub fn ground_truth(ds: &Dataset) -> Vec<GroundTruth> {
    ds.images
        .iter()
        .flat_map(|img| {
            img.instances.iter().map(move |i| GroundTruth { image_id: img.id, category_id: i.category_id, bbox: i.bbox })
        })
        .collect()
}

pub fn iou(a: BBox, b: BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// True positive flag per detection, in input order.
    pub tp: Vec<bool>,
    /// Index of the matched ground truth per detection.
    pub matched_gt: Vec<Option<usize>>,
    pub num_tp: usize,
    pub num_fp: usize,
    /// Ground truths left unmatched.
    pub num_fn: usize,
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("IoU threshold {t} outside (0, 1]")))
    }
}

/// Indices of `scores` sorted descending; ties keep input order.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching within one image: detections in score order each take
/// the highest-IoU unmatched ground truth of their category with
/// IoU ≥ `iou_thresh` (ties to the lower index).
pub fn match_detections(dets: &[Detection], gts: &[(BBox, u64)], iou_thresh: f64) -> Result<MatchResult> {
    check_threshold(iou_thresh)?;
    let mut taken = vec![false; gts.len()];
    let mut matched_gt = vec![None; dets.len()];
    for d in score_order(dets.iter().map(|d| d.score)) {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, &(gbox, gcat)) in gts.iter().enumerate() {
            if taken[g] || gcat != det.category_id {
                continue;
            }
            let v = iou(det.bbox, gbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            matched_gt[d] = Some(g);
        }
    }
    let tp: Vec<bool> = matched_gt.iter().map(Option::is_some).collect();
    let num_tp = tp.iter().filter(|&&t| t).count();
    Ok(MatchResult { num_fp: dets.len() - num_tp, num_fn: gts.len() - num_tp, num_tp, tp, matched_gt })
}

/// 101-point interpolated AP of a ranked list of `(score, is_tp)` pairs.
/// `None` when there is neither ground truth nor any detection.
pub fn average_precision(labeled: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if labeled.is_empty() { None } else { Some(0.0) };
    }
    let order = score_order(labeled.iter().map(|l| l.0));
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if labeled[i].1 {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let k = recall.partition_point(|&rc| rc < level);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category_id: u64,
    pub name: String,
    pub num_gt: usize,
    pub num_dets: usize,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ar100: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map50: f64,
    pub map75: f64,
    pub mar100: f64,
    /// IoU thresholds AR is averaged over.
    pub ar_iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub per_category: Vec<CategoryMetrics>,
}

impl MetricsReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["category", "num_gt", "num_dets", "ap50", "ap75", "ar100"])?;
        for c in &self.per_category {
            w.write_record([
                c.name.clone(),
                c.num_gt.to_string(),
                c.num_dets.to_string(),
                fmt(c.ap50),
                fmt(c.ap75),
                fmt(c.ar100),
            ])?;
        }
        let total_gt: usize = self.per_category.iter().map(|c| c.num_gt).sum();
        let total_dets: usize = self.per_category.iter().map(|c| c.num_dets).sum();
        w.write_record([
            "all".to_string(),
            total_gt.to_string(),
            total_dets.to_string(),
            self.map50.to_string(),
            self.map75.to_string(),
            self.mar100.to_string(),
        ])?;
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-category AP at 0.50 and 0.75 and AR averaged over both, keeping at
/// most `max_dets` top-scoring detections per image. Categories with no
/// ground truth and no detections are left out of the means; AR ignores
/// categories without ground truth.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    categories: &[Category],
    max_dets: usize,
) -> Result<MetricsReport> {
    for d in dets {
        if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
            return Err(Error::InvalidParam(format!("detection score {} outside [0, 1]", d.score)));
        }
        if categories.iter().all(|c| c.id != d.category_id) {
            return Err(Error::DanglingReference(format!("detection → category {}", d.category_id)));
        }
    }
    for g in gts {
        if categories.iter().all(|c| c.id != g.category_id) {
            return Err(Error::DanglingReference(format!("ground truth → category {}", g.category_id)));
        }
    }
    // Per-image detection cap, then grouping by image.
    let mut by_image: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_image.entry(d.image_id).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().1.push(i);
    }
    let mut kept: Vec<usize> = Vec::new();
    for (det_ids, _) in by_image.values_mut() {
        let order = score_order(det_ids.iter().map(|&i| dets[i].score));
        let mut top: Vec<usize> = order.into_iter().take(max_dets).map(|k| det_ids[k]).collect();
        top.sort_unstable();
        *det_ids = top;
        kept.extend_from_slice(det_ids);
    }
    kept.sort_unstable();

    // TP flags per threshold for every kept detection.
    let mut is_tp: Vec<HashMap<usize, bool>> = vec![HashMap::new(); IOU_THRESHOLDS.len()];
    for (det_ids, gt_ids) in by_image.values() {
        let d: Vec<Detection> = det_ids.iter().map(|&i| dets[i]).collect();
        let g: Vec<(BBox, u64)> = gt_ids.iter().map(|&i| (gts[i].bbox, gts[i].category_id)).collect();
        for (t, &thresh) in IOU_THRESHOLDS.iter().enumerate() {
            let m = match_detections(&d, &g, thresh)?;
            for (k, &flag) in m.tp.iter().enumerate() {
                is_tp[t].insert(det_ids[k], flag);
            }
        }
    }

    let mut per_category = Vec::with_capacity(categories.len());
    for cat in categories {
        let num_gt = gts.iter().filter(|g| g.category_id == cat.id).count();
        let cat_dets: Vec<usize> = kept.iter().copied().filter(|&i| dets[i].category_id == cat.id).collect();
        let mut aps = Vec::new();
        let mut recalls = Vec::new();
        for flags in &is_tp {
            let labeled: Vec<(f64, bool)> = cat_dets.iter().map(|&i| (dets[i].score, flags[&i])).collect();
            aps.push(average_precision(&labeled, num_gt));
            let tp = labeled.iter().filter(|l| l.1).count();
            recalls.push((num_gt > 0).then(|| tp as f64 / num_gt as f64));
        }
        let ar100 = (num_gt > 0).then(|| mean_defined(recalls.into_iter()));
        per_category.push(CategoryMetrics {
            category_id: cat.id,
            name: cat.name.clone(),
            num_gt,
            num_dets: cat_dets.len(),
            ap50: aps[0],
            ap75: aps[1],
            ar100,
        });
    }
    Ok(MetricsReport {
        map50: mean_defined(per_category.iter().map(|c| c.ap50)),
        map75: mean_defined(per_category.iter().map(|c| c.ap75)),
        mar100: mean_defined(per_category.iter().map(|c| c.ar100)),
        ar_iou_thresholds: IOU_THRESHOLDS.to_vec(),
        max_dets,
        per_category,
    })
}

/// COCO results entry: `{image_id, category_id, bbox: [x, y, w, h], score}`.
#[derive(Serialize, Deserialize)]
struct ResultEntry {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let entries: Vec<ResultEntry> =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("detection results: {e}")))?;
    entries
        .into_iter()
        .map(|e| {
            let bbox = BBox::from_xywh(e.bbox);
            if !bbox.is_valid() {
                return Err(Error::Parse(format!("detection bbox {:?} is invalid", e.bbox)));
            }
            if !(e.score.is_finite() && (0.0..=1.0).contains(&e.score)) {
                return Err(Error::Parse(format!("detection score {} outside [0, 1]", e.score)));
            }
            Ok(Detection { image_id: e.image_id, category_id: e.category_id, bbox, score: e.score })
        })
        .collect()
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    parse_detections(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn detections_to_json(dets: &[Detection]) -> String {
    let entries: Vec<ResultEntry> = dets
        .iter()
        .map(|d| ResultEntry { image_id: d.image_id, category_id: d.category_id, bbox: d.bbox.to_xywh(), score: d.score })
        .collect();
    serde_json::to_string_pretty(&entries).expect("detections serialize")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeOrderedRow {
    pub category: String,
    pub size_ratio: f64,
    /// AP at IoU 0.50 per variant, in variant order; NaN when undefined.
    pub ap50: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeOrderedTable {
    pub variants: Vec<String>,
    pub rows: Vec<SizeOrderedRow>,
}

impl SizeOrderedTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["category".to_string(), "size_ratio".to_string()];
        header.extend(self.variants.iter().map(|v| format!("ap50_{v}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.category.clone(), r.size_ratio.to_string()];
            rec.extend(r.ap50.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Per-category AP50 of several variants, rows sorted by mean size ratio
/// descending (stable for equal ratios). Categories come from the first
/// report; every one needs statistics.
pub fn size_ordered_table(variants: &[(&str, &MetricsReport)], stats: &[CategoryStats]) -> Result<SizeOrderedTable> {
    let Some((_, first)) = variants.first() else {
        return Ok(SizeOrderedTable { variants: vec![], rows: vec![] });
    };
    let mut rows = Vec::with_capacity(first.per_category.len());
    for c in &first.per_category {
        let st = stats
            .iter()
            .find(|s| s.category_id == c.category_id)
            .ok_or_else(|| Error::MissingStats(c.name.clone()))?;
        let ap50 = variants
            .iter()
            .map(|(_, r)| {
                r.per_category.iter().find(|x| x.category_id == c.category_id).and_then(|x| x.ap50).unwrap_or(f64::NAN)
            })
            .collect();
        rows.push(SizeOrderedRow { category: c.name.clone(), size_ratio: st.mean_size_ratio, ap50 });
    }
    rows.sort_by(|a, b| b.size_ratio.total_cmp(&a.size_ratio));
    Ok(SizeOrderedTable { variants: variants.iter().map(|(n, _)| n.to_string()).collect(), rows })
}

pub fn size_ordered_report(report: &MetricsReport, stats: &[CategoryStats]) -> Result<SizeOrderedTable> {
    size_ordered_table(&[("model", report)], stats)
}
