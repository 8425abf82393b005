use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Reference augmentation: horizontal flip, rotation, blur and elastic warp,
/// applied in that order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub flip_prob: f64,
    pub rotate_limit_degrees: f64,
    pub blur_prob: f64,
    pub elastic_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            flip_prob: 0.5,
            rotate_limit_degrees: 20.0,
            blur_prob: 0.3,
            elastic_prob: 0.3,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy {
            flip_prob: 0.0,
            rotate_limit_degrees: 0.0,
            blur_prob: 0.0,
            elastic_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("blur_prob", self.blur_prob),
            ("elastic_prob", self.elastic_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.rotate_limit_degrees >= 0.0) {
            return Err(Error::Parameter("rotate limit must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn augment_reference(image: &Image, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Image {
    let mut out = image.clone();
    if rng.random_bool(policy.flip_prob) {
        out = out.flip_horizontal();
    }
    if policy.rotate_limit_degrees > 0.0 {
        let angle = rng.random_range(-policy.rotate_limit_degrees..=policy.rotate_limit_degrees);
        out = rotate(&out, angle);
    }
    if rng.random_bool(policy.blur_prob) {
        let sigma = rng.random_range(0.5..1.5);
        out = gaussian_blur(&out, sigma);
    }
    if rng.random_bool(policy.elastic_prob) {
        out = elastic_deform(&out, rng);
    }
    out.clamp_unit();
    out
}

/// Rotation about the image center, bilinear, borders clamped.
pub fn rotate(image: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return image.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (image.height() as f64 - 1.0) / 2.0;
    let cx = (image.width() as f64 - 1.0) / 2.0;
    Image::from_fn(image.height(), image.width(), image.channels(), |y, x, c| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // inverse map: rotate the destination coordinate back into the source
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        image.sample_bilinear(sy, sx, c)
    })
}

/// Separable Gaussian blur with a `ceil(3 sigma)` radius and clamped borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (image.height() as isize, image.width() as isize);
    let horizontal = Image::from_fn(image.height(), image.width(), image.channels(), |y, x, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, k)| {
                let xx = (x as isize + j as isize - radius).clamp(0, w - 1) as usize;
                k * image.get(y, xx, c)
            })
            .sum()
    });
    Image::from_fn(image.height(), image.width(), image.channels(), |y, x, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, k)| {
                let yy = (y as isize + j as isize - radius).clamp(0, h - 1) as usize;
                k * horizontal.get(yy, x, c)
            })
            .sum()
    })
}

const ELASTIC_GRID: usize = 4;
const ELASTIC_AMPLITUDE: f64 = 0.1;

/// Warps by a random 4x4 displacement field (each component at most 10% of
/// the image side) upsampled bilinearly to full resolution.
pub fn elastic_deform(image: &Image, rng: &mut impl Rng) -> Image {
    let (h, w) = (image.height(), image.width());
    let amp_y = ELASTIC_AMPLITUDE * h as f64;
    let amp_x = ELASTIC_AMPLITUDE * w as f64;
    let n = ELASTIC_GRID * ELASTIC_GRID;
    let field_y: Vec<f64> = (0..n).map(|_| rng.random_range(-amp_y..=amp_y)).collect();
    let field_x: Vec<f64> = (0..n).map(|_| rng.random_range(-amp_x..=amp_x)).collect();
    let upsample = |field: &[f64], y: usize, x: usize| {
        let gy = y as f64 / (h.max(2) - 1) as f64 * (ELASTIC_GRID - 1) as f64;
        let gx = x as f64 / (w.max(2) - 1) as f64 * (ELASTIC_GRID - 1) as f64;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(ELASTIC_GRID - 1), (x0 + 1).min(ELASTIC_GRID - 1));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let at = |yy: usize, xx: usize| field[yy * ELASTIC_GRID + xx];
        (at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx) * (1.0 - fy) + (at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx) * fy
    };
    Image::from_fn(h, w, image.channels(), |y, x, c| {
        let sy = y as f64 + upsample(&field_y, y, x);
        let sx = x as f64 + upsample(&field_x, y, x);
        image.sample_bilinear(sy, sx, c)
    })
}
