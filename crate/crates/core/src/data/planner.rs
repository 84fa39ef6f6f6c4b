//! Class balancing by synthesizing augmented copies of existing images.
//!
//! Counts are images per category: an image counts toward every category it
//! holds at least one instance of. Planning runs on boxes only, so a plan
//! can be drawn without decoding pixels and replayed later.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_chain, Transform};
use super::{AnnotatedImage, Dataset};
use crate::error::{Error, Result};

/// Consecutive failed draws before planning gives up on a category.
const MAX_ATTEMPTS: usize = 1000;

/// Per-split image-count targets keyed by category name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitTargets {
    #[serde(default)]
    pub train: BTreeMap<String, usize>,
    #[serde(default)]
    pub val: BTreeMap<String, usize>,
}

impl SplitTargets {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("augmentation targets: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub source_id: u64,
    pub new_id: u64,
    /// Category whose deficit this image was drawn for.
    pub category: String,
    pub transforms: Vec<Transform>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub seed: u64,
    pub targets: BTreeMap<String, usize>,
    /// Image counts per category before augmentation.
    pub initial: BTreeMap<String, usize>,
    /// Image counts per category the records are expected to reach.
    pub planned: BTreeMap<String, usize>,
    pub records: Vec<SynthRecord>,
}

fn image_counts(ds: &Dataset) -> BTreeMap<String, usize> {
    ds.categories.iter().map(|c| (c.name.clone(), ds.images_with(c.id))).collect()
}

fn credit(counts: &mut BTreeMap<String, usize>, ds: &Dataset, img: &AnnotatedImage) {
    for c in &ds.categories {
        if img.has_category(c.id) {
            *counts.get_mut(&c.name).expect("category counted") += 1;
        }
    }
}

fn boxes_only(img: &AnnotatedImage) -> AnnotatedImage {
    AnnotatedImage { pixels: None, ..img.clone() }
}

/// Draws transform chains until every category reaches its target. Targets
/// at or below the current count are no-ops.
pub fn plan_augmentation(ds: &Dataset, targets: &BTreeMap<String, usize>, seed: u64) -> Result<AugmentPlan> {
    for name in targets.keys() {
        if ds.category_by_name(name).is_none() {
            return Err(Error::InvalidParam(format!("target for unknown category {name:?}")));
        }
    }
    let initial = image_counts(ds);
    let mut counts = initial.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_id = ds.next_image_id();
    let mut records = Vec::new();
    for cat in &ds.categories {
        let Some(&target) = targets.get(&cat.name) else { continue };
        let sources: Vec<&AnnotatedImage> = ds.images.iter().filter(|i| i.has_category(cat.id)).collect();
        if sources.is_empty() {
            if target > 0 {
                return Err(Error::InvalidParam(format!(
                    "category {:?} has no instances but a target of {target}",
                    cat.name
                )));
            }
            continue;
        }
        let mut failures = 0;
        while counts[&cat.name] < target {
            let src = *sources.choose(&mut rng).expect("sources non-empty");
            let chain = Transform::sample_chain(&mut rng, src.width, src.height);
            let out = augment_chain(&boxes_only(src), &chain)?;
            if !out.has_category(cat.id) {
                failures += 1;
                if failures >= MAX_ATTEMPTS {
                    return Err(Error::AugmentationStalled {
                        category: cat.name.clone(),
                        achieved: counts[&cat.name],
                        target,
                    });
                }
                continue;
            }
            failures = 0;
            credit(&mut counts, ds, &out);
            records.push(SynthRecord {
                source_id: src.id,
                new_id: next_id,
                category: cat.name.clone(),
                transforms: chain,
            });
            next_id += 1;
        }
    }
    Ok(AugmentPlan { seed, targets: targets.clone(), initial, planned: counts, records })
}

/// Replays a plan on `ds`, appending one synthesized image per record.
/// Fails with `AugmentationStalled` when a target is not reached.
pub fn execute_plan(ds: &Dataset, plan: &AugmentPlan) -> Result<Dataset> {
    let mut out = ds.clone();
    for rec in &plan.records {
        let src = ds
            .images
            .iter()
            .find(|i| i.id == rec.source_id)
            .ok_or_else(|| Error::DanglingReference(format!("plan record → image {}", rec.source_id)))?;
        let mut img = augment_chain(src, &rec.transforms)?;
        img.id = rec.new_id;
        img.file_name = format!("aug_{}_{}", rec.new_id, src.file_name);
        out.images.push(img);
    }
    let achieved = image_counts(&out);
    for (name, &target) in &plan.targets {
        let got = achieved.get(name).copied().unwrap_or(0);
        if got < target {
            return Err(Error::AugmentationStalled { category: name.clone(), achieved: got, target });
        }
    }
    Ok(out)
}

pub fn plan_and_execute(
    ds: &Dataset,
    targets: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<(AugmentPlan, Dataset)> {
    let plan = plan_augmentation(ds, targets, seed)?;
    let out = execute_plan(ds, &plan)?;
    Ok((plan, out))
}
