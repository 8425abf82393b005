//! Float images in `[-1, 1]`, stored row-major as `H x W x C`.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest side accepted at API boundaries.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape("image with an empty dimension".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Full invariant check used at API boundaries: finite values, sides ≥ 8.
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image is {}x{}, minimum side is {MIN_SIDE}",
                self.height, self.width
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Image {
        assert!(x + w <= self.width && y + h <= self.height, "crop out of bounds");
        Image::from_fn(h, w, self.channels, |yy, xx, c| self.get(y + yy, x + xx, c))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at integers),
    /// clamping to the border.
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with half-pixel centers; returns an exact copy when the
    /// size is unchanged.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Image::from_fn(height, width, self.channels, |y, x, c| {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            self.sample_bilinear(src_y, src_x, c)
        })
    }

    /// Planar `[C, H, W]` copy of the pixels.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for (p, px) in self.data.chunks(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * hw + p] = *v;
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, channels: usize, planar: &[f64]) -> Image {
        let hw = height * width;
        assert_eq!(planar.len(), hw * channels);
        let mut data = vec![0.0; planar.len()];
        for c in 0..channels {
            for p in 0..hw {
                data[p * channels + c] = planar[c * hw + p];
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    /// Stacks images into an `[N, C, H, W]` tensor.
    pub fn batch_to_tensor(images: &[&Image]) -> Result<Tensor> {
        let (h, w, c) = images[0].dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                return Err(Error::Shape(format!(
                    "batch mixes {:?} and {:?} images",
                    (h, w, c),
                    img.dims()
                )));
            }
            data.extend(img.to_chw());
        }
        Tensor::from_vec(&[images.len(), c, h, w], data)
    }

    /// Splits an `[N, C, H, W]` tensor back into images.
    pub fn batch_from_tensor(t: &Tensor) -> Vec<Image> {
        let s = t.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        t.data()
            .chunks(c * h * w)
            .map(|chunk| Image::from_chw(h, w, c, chunk))
            .collect()
    }

    /// Quantizes to 8-bit RGB; values are clipped to `[-1, 1]` first.
    pub fn to_rgb8(&self) -> RgbImage {
        assert_eq!(self.channels, 3, "to_rgb8 needs a 3-channel image");
        let raw = self.data.iter().map(|&v| to_u8(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).unwrap()
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&b| from_u8(b)).collect(),
        }
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Input(format!("cannot decode image: {e}")))?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, ImageFormat::Png)
            .expect("in-memory PNG encoding");
        buf.into_inner()
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_png(&bytes).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()).map_err(|e| Error::io(path, e))
    }
}

pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Decodes a grayscale PNG into a `{0, 1}` map, thresholding at 128.
pub fn decode_mask_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Input(format!("cannot decode mask: {e}")))?;
    let gray = img.to_luma8();
    let bits = gray.as_raw().iter().map(|&v| u8::from(v >= 128)).collect();
    Ok((gray.height() as usize, gray.width() as usize, bits))
}

/// Encodes a `{0, 1}` map as an 8-bit grayscale PNG (0 or 255).
pub fn encode_mask_png(height: usize, width: usize, bits: &[u8]) -> Vec<u8> {
    let raw = bits.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, raw).unwrap();
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}
