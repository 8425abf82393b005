//! Brush-like mask shapes derived from bounding boxes.
//!
//! Each box edge is treated as a Bézier curve (for a straight edge the curve
//! is the edge itself), sampled at [`POINTS_PER_EDGE`] uniformly spaced
//! parameters, and every sample is jittered by an integer pixel offset on
//! each axis. The jittered points are joined in order into a closed polygon
//! and rasterized with the even-odd rule at pixel centers.

use rand::Rng;

use super::{BBox, EditMask};
use crate::error::{Error, Result};

pub const POINTS_PER_EDGE: usize = 20;

/// Magnitude range of per-coordinate offsets; the sign is drawn separately.
/// `min == max == 0` disables distortion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OffsetRange {
    pub min: i32,
    pub max: i32,
}

impl OffsetRange {
    pub const DEFAULT: OffsetRange = OffsetRange { min: 1, max: 5 };
    pub const NONE: OffsetRange = OffsetRange { min: 0, max: 0 };

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.max == 0 {
            return 0.0;
        }
        let magnitude = rng.random_range(self.min..=self.max);
        let sign = if rng.random_bool(0.5) { 1 } else { -1 };
        (sign * magnitude) as f64
    }
}

pub fn distort_mask(bbox: &BBox, image_size: (usize, usize), rng: &mut impl Rng) -> Result<EditMask> {
    distort_mask_with(bbox, image_size, OffsetRange::DEFAULT, rng)
}

pub fn distort_mask_with(
    bbox: &BBox,
    image_size: (usize, usize),
    offsets: OffsetRange,
    rng: &mut impl Rng,
) -> Result<EditMask> {
    let (height, width) = image_size;
    if offsets.min < 0 || offsets.min > offsets.max {
        return Err(Error::Parameter(format!("invalid offset range {offsets:?}")));
    }
    let (x0, y0) = (bbox.x as f64, bbox.y as f64);
    let (x1, y1) = ((bbox.x + bbox.w) as f64, (bbox.y + bbox.h) as f64);
    let corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)];

    let mut polygon = Vec::with_capacity(4 * POINTS_PER_EDGE);
    for e in 0..4 {
        let (a, b) = (corners[e], corners[(e + 1) % 4]);
        let controls = [a, lerp(a, b, 1.0 / 3.0), lerp(a, b, 2.0 / 3.0), b];
        for i in 0..POINTS_PER_EDGE {
            let t = i as f64 / (POINTS_PER_EDGE - 1) as f64;
            let (px, py) = cubic_bezier(&controls, t);
            polygon.push((px + offsets.draw(rng), py + offsets.draw(rng)));
        }
    }

    let raster = rasterize_even_odd(&polygon, height, width);
    let mask = EditMask::new(height, width, raster)?;
    let comps = mask.components();
    // Keep the piece that overlaps the box most; self-intersections of the
    // jittered outline can leave small detached islands.
    let best = comps
        .iter()
        .max_by_key(|c| {
            let overlap = c.iter().filter(|&&i| bbox.contains(i / width, i % width)).count();
            (overlap, c.len())
        })
        .ok_or_else(|| Error::Parameter(format!("{bbox:?} rasterizes to an empty mask")))?;
    let mut bits = vec![0u8; height * width];
    for &i in best {
        bits[i] = 1;
    }
    EditMask::new(height, width, bits)
}

fn lerp(a: (f64, f64), b: (f64, f64), t: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
}

fn cubic_bezier(p: &[(f64, f64); 4], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let (b0, b1, b2, b3) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        b0 * p[0].0 + b1 * p[1].0 + b2 * p[2].0 + b3 * p[3].0,
        b0 * p[0].1 + b1 * p[1].1 + b2 * p[2].1 + b3 * p[3].1,
    )
}

/// Even-odd fill of a closed polygon sampled at pixel centers.
fn rasterize_even_odd(polygon: &[(f64, f64)], height: usize, width: usize) -> Vec<u8> {
    let mut bits = vec![0u8; height * width];
    let mut crossings = Vec::new();
    for py in 0..height {
        let yc = py as f64 + 0.5;
        crossings.clear();
        for i in 0..polygon.len() {
            let (xa, ya) = polygon[i];
            let (xb, yb) = polygon[(i + 1) % polygon.len()];
            if (ya <= yc) != (yb <= yc) {
                crossings.push(xa + (yc - ya) * (xb - xa) / (yb - ya));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in crossings.chunks_exact(2) {
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = (pair[1] - 0.5).ceil().min(width as f64).max(0.0) as usize;
            for px in start..end {
                bits[py * width + px] = 1;
            }
        }
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bezier_of_straight_edge_is_uniform_on_segment() {
        let c = [(0.0, 0.0), (1.0, 2.0), (2.0, 4.0), (3.0, 6.0)];
        for i in 0..POINTS_PER_EDGE {
            let t = i as f64 / 19.0;
            let (x, y) = cubic_bezier(&c, t);
            assert!((x - 3.0 * t).abs() < 1e-12 && (y - 6.0 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_offsets_reproduce_the_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bbox in [BBox::new(3, 5, 10, 7), BBox::new(0, 0, 4, 4), BBox::new(20, 24, 12, 8)] {
            let m = distort_mask_with(&bbox, (32, 32), OffsetRange::NONE, &mut rng).unwrap();
            assert_eq!(m, EditMask::from_box(&bbox, 32, 32));
        }
    }

    #[test]
    fn rasterizer_fills_pixel_centers_inside() {
        let square = [(1.0, 1.0), (4.0, 1.0), (4.0, 3.0), (1.0, 3.0)];
        let bits = rasterize_even_odd(&square, 5, 5);
        let ones: Vec<usize> = (0..25).filter(|&i| bits[i] == 1).collect();
        assert_eq!(ones, vec![6, 7, 8, 11, 12, 13]);
    }

    #[test]
    fn distorted_masks_are_connected_and_nonempty() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let m = distort_mask(&BBox::new(8, 8, 12, 10), (32, 32), &mut rng).unwrap();
            assert!(m.is_connected());
        }
    }

    #[test]
    fn rejects_bad_offset_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = distort_mask_with(&BBox::new(0, 0, 8, 8), (32, 32), OffsetRange { min: 3, max: 1 }, &mut rng);
        assert!(r.is_err());
    }
}
