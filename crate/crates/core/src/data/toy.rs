//! Procedural scenes: a textured background with one to three flat-colored
//! shapes, annotated with exact bounding boxes.

use rand::Rng;

use super::{AnnotatedImage, BBox, MIN_BOX_SIDE};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.9, -0.8, -0.8],
    [-0.8, 0.9, -0.8],
    [-0.8, -0.8, 0.9],
    [0.9, 0.9, -0.8],
    [0.9, -0.8, 0.9],
    [-0.8, 0.9, 0.9],
];

const PLACEMENT_TRIES: usize = 50;

impl ShapeKind {
    fn random(rng: &mut impl Rng) -> Self {
        match rng.random_range(0..3) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        }
    }

    /// Whether the pixel center `(px + 0.5, py + 0.5)` lies in a shape of side
    /// `size` whose enclosing square starts at `(left, top)`.
    fn covers(self, left: f64, top: f64, size: f64, py: usize, px: usize) -> bool {
        let (x, y) = (px as f64 + 0.5 - left, py as f64 + 0.5 - top);
        if x < 0.0 || y < 0.0 || x > size || y > size {
            return false;
        }
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = size / 2.0;
                (x - r) * (x - r) + (y - r) * (y - r) <= r * r
            }
            // apex at top center, base along the bottom
            ShapeKind::Triangle => (x - size / 2.0).abs() <= y / 2.0,
        }
    }
}

/// Renders `n` deterministic scenes of the given `(height, width)`.
pub fn generate_toy_dataset(n: usize, size: (usize, usize), rng: &mut impl Rng) -> Vec<AnnotatedImage> {
    (0..n).map(|_| toy_scene(size, rng)).collect()
}

fn toy_scene((height, width): (usize, usize), rng: &mut impl Rng) -> AnnotatedImage {
    let mut image = background(height, width, rng);
    let max_side = ((height.min(width) as f64) / 2.0)
        .min(((height * width) as f64 / 2.0).sqrt())
        .floor() as usize;
    let min_side = (height.min(width) / 5).max(MIN_BOX_SIDE + 2).min(max_side);
    let count = rng.random_range(1..=3);
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            let kind = ShapeKind::random(rng);
            let side = rng.random_range(min_side..=max_side);
            let left = rng.random_range(0..=width - side) as f64;
            let top = rng.random_range(0..=height - side) as f64;
            let Some(bbox) = tight_box(kind, left, top, side as f64, height, width) else {
                continue;
            };
            if bbox.validate(height, width).is_err() || boxes.iter().any(|b| b.overlaps(&bbox, 1)) {
                continue;
            }
            let color = PALETTE[rng.random_range(0..PALETTE.len())];
            for y in bbox.y..bbox.y + bbox.h {
                for x in bbox.x..bbox.x + bbox.w {
                    if kind.covers(left, top, side as f64, y, x) {
                        for (c, v) in color.iter().enumerate() {
                            image.set(y, x, c, *v);
                        }
                    }
                }
            }
            boxes.push(bbox);
            break;
        }
    }
    AnnotatedImage { image, boxes }
}

fn tight_box(kind: ShapeKind, left: f64, top: f64, size: f64, height: usize, width: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let ys = (top.floor() as usize)..((top + size).ceil() as usize).min(height);
    for y in ys {
        for x in (left.floor() as usize)..((left + size).ceil() as usize).min(width) {
            if kind.covers(left, top, size, y, x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

/// Muted base color, a linear gradient and faint diagonal stripes.
fn background(height: usize, width: usize, rng: &mut impl Rng) -> Image {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.4..0.4));
    let grad: [f64; 2] = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
    let freq = rng.random_range(0.2..0.8);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    Image::from_fn(height, width, 3, |y, x, c| {
        let u = y as f64 / height as f64 - 0.5;
        let v = x as f64 / width as f64 - 0.5;
        let stripes = 0.08 * ((x + y) as f64 * freq + phase).sin();
        (base[c] + grad[0] * u + grad[1] * v + stripes).clamp(-1.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_and_determinism() {
        let a = generate_toy_dataset(100, (32, 32), &mut ChaCha8Rng::seed_from_u64(7));
        let b = generate_toy_dataset(100, (32, 32), &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        for item in &a {
            assert!((1..=3).contains(&item.boxes.len()));
            item.validate().unwrap();
        }
    }

    #[test]
    fn boxes_tightly_contain_shape_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = generate_toy_dataset(50, (32, 40), &mut rng);
        for item in &data {
            for bbox in &item.boxes {
                // Shape pixels use palette colors; the background never does.
                let is_shape = |y: usize, x: usize| {
                    let px = item.image.pixel(y, x);
                    PALETTE.iter().any(|c| c[..] == *px)
                };
                let mut found: Option<BBox> = None;
                for y in 0..32 {
                    for x in 0..40 {
                        if is_shape(y, x) && bbox.contains(y, x) {
                            found = Some(match found {
                                None => BBox::new(x, y, 1, 1),
                                Some(b) => {
                                    let x0 = b.x.min(x);
                                    let y0 = b.y.min(y);
                                    let x1 = (b.x + b.w).max(x + 1);
                                    let y1 = (b.y + b.h).max(y + 1);
                                    BBox::new(x0, y0, x1 - x0, y1 - y0)
                                }
                            });
                        }
                    }
                }
                assert_eq!(found, Some(*bbox));
            }
        }
    }
}
