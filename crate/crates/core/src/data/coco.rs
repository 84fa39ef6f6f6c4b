//! COCO-style annotation documents: `images`, `annotations` with
//! `bbox: [x, y, w, h]`, and `categories`. Other top-level keys are ignored.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, BBox, Category, Dataset, Instance};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_deserializing)]
    area: f64,
    #[serde(default, skip_deserializing)]
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    supercategory: Option<String>,
}

/// Parses a COCO document held in memory. Pixels are not loaded.
pub fn parse_coco(text: &str) -> Result<Dataset> {
    let doc: CocoDoc = serde_json::from_str(text).map_err(|e| Error::Parse(format!("COCO document: {e}")))?;
    let categories: Vec<Category> = doc.categories.into_iter().map(|c| Category { id: c.id, name: c.name }).collect();
    let mut seen_cat = std::collections::HashSet::new();
    for c in &categories {
        if !seen_cat.insert(c.id) {
            return Err(Error::Parse(format!("duplicate category id {}", c.id)));
        }
    }
    let mut images = Vec::with_capacity(doc.images.len());
    let mut by_id = HashMap::new();
    for im in doc.images {
        if im.width == 0 || im.height == 0 {
            return Err(Error::Parse(format!("image {} has zero extent", im.id)));
        }
        if by_id.insert(im.id, images.len()).is_some() {
            return Err(Error::Parse(format!("duplicate image id {}", im.id)));
        }
        images.push(AnnotatedImage {
            id: im.id,
            file_name: im.file_name,
            width: im.width,
            height: im.height,
            pixels: None,
            instances: Vec::new(),
        });
    }
    for ann in doc.annotations {
        let &slot = by_id
            .get(&ann.image_id)
            .ok_or_else(|| Error::DanglingReference(format!("annotation {} → image {}", ann.id, ann.image_id)))?;
        if !seen_cat.contains(&ann.category_id) {
            return Err(Error::DanglingReference(format!(
                "annotation {} → category {}",
                ann.id, ann.category_id
            )));
        }
        let bbox = BBox::from_xywh(ann.bbox);
        if !bbox.is_valid() {
            return Err(Error::Parse(format!("annotation {} has invalid bbox {:?}", ann.id, ann.bbox)));
        }
        let img = &mut images[slot];
        if !bbox.intersects_image(img.width as f64, img.height as f64) {
            log::warn!("annotation {} lies outside image {}; dropped", ann.id, img.id);
            continue;
        }
        img.instances.push(Instance { bbox, category_id: ann.category_id });
    }
    Ok(Dataset { images, categories })
}

pub fn load_coco(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco(&text)
}

pub fn to_coco_json(ds: &Dataset) -> String {
    let mut annotations = Vec::new();
    for img in &ds.images {
        for inst in &img.instances {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: img.id,
                category_id: inst.category_id,
                bbox: inst.bbox.to_xywh(),
                area: inst.bbox.area(),
                iscrowd: 0,
            });
        }
    }
    let doc = CocoDoc {
        images: ds
            .images
            .iter()
            .map(|i| CocoImage { id: i.id, file_name: i.file_name.clone(), width: i.width, height: i.height })
            .collect(),
        annotations,
        categories: ds
            .categories
            .iter()
            .map(|c| CocoCategory { id: c.id, name: c.name.clone(), supercategory: None })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("COCO document serializes")
}

pub fn save_coco(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_coco_json(ds)).map_err(|e| Error::io(path, e))
}
