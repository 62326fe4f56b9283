//! Minimal COCO-style annotation loader.
//!
//! Reads `images` (id, width, height) and `annotations` (image_id, bbox as
//! `[x, y, w, h]`, optional iscrowd and category_id). Boxes become corner
//! form; boxes with non-positive width or height are dropped and counted.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::geometry::BBox;
use crate::pipeline::GroundTruth;

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotation file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("annotation {index} refers to image {image_id}, which is not listed")]
    DanglingImage { index: usize, image_id: u64 },
    #[error("image {0} is listed twice")]
    DuplicateImage(u64),
    #[error("image {id} has non-positive size {width}x{height}")]
    EmptyImage { id: u64, width: u32, height: u32 },
}

#[derive(Deserialize)]
struct RawDocument {
    images: Vec<RawImage>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
    #[serde(default)]
    category_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub gts: Vec<GroundTruth>,
    pub categories: Vec<u64>,
}

impl AnnotatedImage {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gts
            .iter()
            .filter(|g| !g.crowd)
            .map(|g| g.bbox)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    /// Sorted by image id; annotations keep file order within an image.
    pub images: Vec<AnnotatedImage>,
    pub dropped: usize,
}

impl AnnotationSet {
    pub fn num_annotations(&self) -> usize {
        self.images.iter().map(|i| i.gts.len()).sum()
    }
}

pub fn parse_annotations(text: &str) -> Result<AnnotationSet, CocoError> {
    let raw: RawDocument = serde_json::from_str(text)?;
    let mut images: BTreeMap<u64, AnnotatedImage> = BTreeMap::new();
    for im in raw.images {
        if im.width == 0 || im.height == 0 {
            return Err(CocoError::EmptyImage {
                id: im.id,
                width: im.width,
                height: im.height,
            });
        }
        let prev = images.insert(
            im.id,
            AnnotatedImage {
                id: im.id,
                width: im.width,
                height: im.height,
                gts: Vec::new(),
                categories: Vec::new(),
            },
        );
        if prev.is_some() {
            return Err(CocoError::DuplicateImage(im.id));
        }
    }
    let mut dropped = 0;
    for (index, a) in raw.annotations.into_iter().enumerate() {
        let image = images
            .get_mut(&a.image_id)
            .ok_or(CocoError::DanglingImage {
                index,
                image_id: a.image_id,
            })?;
        let [x, y, w, h] = a.bbox;
        if !(w > 0.0 && h > 0.0 && x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite())
        {
            dropped += 1;
            continue;
        }
        image.gts.push(GroundTruth {
            bbox: BBox::from_xywh(x, y, w, h),
            crowd: a.iscrowd != 0,
        });
        image.categories.push(a.category_id);
    }
    Ok(AnnotationSet {
        images: images.into_values().collect(),
        dropped,
    })
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet, CocoError> {
    let text = fs::read_to_string(path).map_err(|source| CocoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_annotations(&text)
}
