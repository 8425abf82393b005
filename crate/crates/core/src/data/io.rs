//! Dataset directories: `images/<name>.png` plus `annotations.json`, a list of
//! `{"file": ..., "boxes": [[x, y, w, h], ...]}` records.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, BBox};
use crate::error::{Error, Result};
use crate::image::Image;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    file: String,
    boxes: Vec<[i64; 4]>,
}

/// Result of [`load_annotations`]: the usable images plus what was skipped.
#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub images: Vec<AnnotatedImage>,
    pub files: Vec<String>,
    pub dropped_boxes: usize,
    pub failures: Vec<(String, String)>,
}

/// Writes `images` as a dataset directory and returns the files written.
pub fn save_dataset(dir: &Path, images: &[AnnotatedImage]) -> Result<Vec<PathBuf>> {
    let image_dir = dir.join(IMAGES_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut written = Vec::with_capacity(images.len() + 1);
    let mut records = Vec::with_capacity(images.len());
    for (i, item) in images.iter().enumerate() {
        let rel = format!("{IMAGES_DIR}/{i:05}.png");
        let path = dir.join(&rel);
        item.image.save(&path)?;
        written.push(path);
        records.push(Record {
            file: rel,
            boxes: item
                .boxes
                .iter()
                .map(|b| [b.x as i64, b.y as i64, b.w as i64, b.h as i64])
                .collect(),
        });
    }
    let ann = dir.join(ANNOTATIONS_FILE);
    let json = serde_json::to_string_pretty(&records).expect("records serialize");
    fs::write(&ann, json).map_err(|e| Error::io(&ann, e))?;
    written.push(ann);
    Ok(written)
}

/// Reads a dataset directory. Boxes that leave the image, are smaller than
/// 4 px or cover more than half the image are dropped and counted; images
/// that fail to decode are collected in `failures`.
pub fn load_annotations(dir: &Path) -> Result<LoadedDataset> {
    let ann = dir.join(ANNOTATIONS_FILE);
    if !ann.is_file() {
        return Err(Error::Input(format!("no {ANNOTATIONS_FILE} in {}", dir.display())));
    }
    let text = fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
    let records: Vec<Record> =
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", ann.display())))?;
    let mut out = LoadedDataset::default();
    for rec in records {
        let mut path = dir.join(&rec.file);
        if !path.is_file() {
            path = dir.join(IMAGES_DIR).join(&rec.file);
        }
        let image = match Image::load(&path) {
            Ok(img) => img,
            Err(e) => {
                out.failures.push((rec.file.clone(), e.to_string()));
                continue;
            }
        };
        let mut boxes = Vec::new();
        for [x, y, w, h] in rec.boxes {
            let valid = x >= 0 && y >= 0 && w > 0 && h > 0;
            let bbox = BBox::new(x.max(0) as usize, y.max(0) as usize, w.max(0) as usize, h.max(0) as usize);
            if valid && bbox.validate(image.height(), image.width()).is_ok() {
                boxes.push(bbox);
            } else {
                out.dropped_boxes += 1;
            }
        }
        out.images.push(AnnotatedImage { image, boxes });
        out.files.push(rec.file);
    }
    if out.dropped_boxes > 0 {
        log::warn!("{}: dropped {} invalid boxes", dir.display(), out.dropped_boxes);
    }
    Ok(out)
}
