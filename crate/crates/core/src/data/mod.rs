//! Training-pair synthesis: boxes and masks, mask distortion, reference
//! augmentation, the procedural toy dataset and on-disk dataset I/O.

mod augment;
mod io;
mod mask;
mod sample;
mod toy;

pub use augment::{augment_reference, elastic_deform, gaussian_blur, rotate, AugmentationPolicy};
pub use io::{load_annotations, save_dataset, LoadedDataset, ANNOTATIONS_FILE, IMAGES_DIR};
pub use mask::{distort_mask, distort_mask_with, OffsetRange, POINTS_PER_EDGE};
pub use sample::{make_training_sample, SynthesisConfig, TrainingSample, MASK_FILL};
pub use toy::{generate_toy_dataset, ShapeKind};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Axis-aligned box in pixels; covers columns `x..x+w` and rows `y..y+h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

pub const MIN_BOX_SIDE: usize = 4;

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// Inside the image, sides at least 4, area at most half the image.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::Parameter(format!("{self:?} leaves the {height}x{width} image")));
        }
        if self.w < MIN_BOX_SIDE || self.h < MIN_BOX_SIDE {
            return Err(Error::Parameter(format!("{self:?} has a side below {MIN_BOX_SIDE}")));
        }
        if 2 * self.area() > height * width {
            return Err(Error::Parameter(format!(
                "{self:?} covers more than half of the {height}x{width} image"
            )));
        }
        Ok(())
    }

    pub fn overlaps(&self, other: &BBox, margin: usize) -> bool {
        self.x < other.x + other.w + margin
            && other.x < self.x + self.w + margin
            && self.y < other.y + other.h + margin
            && other.y < self.y + self.h + margin
    }
}

/// Binary `H x W` edit region; 1 marks pixels to regenerate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl EditMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Parameter("mask values must be 0 or 1".into()));
        }
        Ok(EditMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        EditMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_box(bbox: &BBox, height: usize, width: usize) -> Self {
        let mut m = EditMask::empty(height, width);
        for y in bbox.y..(bbox.y + bbox.h).min(height) {
            for x in bbox.x..(bbox.x + bbox.w).min(width) {
                m.bits[y * width + x] = 1;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// True when the 1-region is non-empty and 4-connected.
    pub fn is_connected(&self) -> bool {
        let total = self.count();
        if total == 0 {
            return false;
        }
        let labels = self.components();
        labels.len() == 1
    }

    /// 4-connected components of the 1-region, each as a list of flat indices.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let (h, w) = (self.height, self.width);
        let mut seen = vec![false; h * w];
        let mut comps = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            if self.bits[start] == 0 || seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                comp.push(i);
                let (y, x) = (i / w, i % w);
                let mut visit = |j: usize| {
                    if self.bits[j] != 0 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
            }
            comps.push(comp);
        }
        comps
    }

    /// Tight bounding rectangle of the 1-region.
    pub fn bounding_rect(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    /// `[1, H, W]` planar float copy.
    pub fn to_planar(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.to_planar()).unwrap()
    }

    pub fn to_png(&self) -> Vec<u8> {
        crate::image::encode_mask_png(self.height, self.width, &self.bits)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let (h, w, bits) = crate::image::decode_mask_png(bytes)?;
        EditMask::new(h, w, bits)
    }
}

/// An image with its object boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: Image,
    pub boxes: Vec<BBox>,
}

impl AnnotatedImage {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        for b in &self.boxes {
            b.validate(self.image.height(), self.image.width())?;
        }
        Ok(())
    }
}

/// `source` with the masked pixels replaced by `fill`.
pub fn mask_out(source: &Image, mask: &EditMask, fill: f64) -> Result<Image> {
    if (source.height(), source.width()) != (mask.height(), mask.width()) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            source.height(),
            source.width()
        )));
    }
    let mut out = source.clone();
    let c = source.channels();
    for (i, px) in out.data_mut().chunks_mut(c).enumerate() {
        if mask.bits[i] != 0 {
            px.iter_mut().for_each(|v| *v = fill);
        }
    }
    Ok(out)
}

/// `(1 - m) * background + m * foreground`, copying pixels rather than blending
/// so unmasked values are bit-identical to `background`.
pub fn composite(background: &Image, foreground: &Image, mask: &EditMask) -> Result<Image> {
    if background.dims() != foreground.dims()
        || (background.height(), background.width()) != (mask.height(), mask.width())
    {
        return Err(Error::Shape("composite: mismatched image or mask sizes".into()));
    }
    let mut out = background.clone();
    let c = background.channels();
    for (i, (dst, src)) in out
        .data_mut()
        .chunks_mut(c)
        .zip(foreground.data().chunks(c))
        .enumerate()
    {
        if mask.bits[i] != 0 {
            dst.copy_from_slice(src);
        }
    }
    Ok(out)
}
