//! Planar floating-point images.
//!
//! Pixels are stored channel-major (`data[c * h * w + y * w + x]`), which is the
//! layout the convolution kernels consume directly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Declared value range of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelRange {
    /// Values in (-1, 1), the range the networks consume and produce.
    Normalized,
    /// Values in [0, 255].
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub range: PixelRange,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        range: PixelRange,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            range,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, range: PixelRange, v: f64) -> Self {
        Self {
            height,
            width,
            channels,
            range,
            data: vec![v; height * width * channels],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, range: PixelRange, mut f: impl FnMut(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            range,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute value, used for range checks.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(h, w, 3, PixelRange::Raw, 0.0);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f64);
            }
        }
        out
    }

    /// Quantizes a raw-range image to 8 bits, rounding to nearest.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.range != PixelRange::Raw {
            return Err(Error::Shape("to_rgb8 expects a raw [0,255] image".into()));
        }
        if self.channels != 3 {
            return Err(Error::Shape(format!(
                "expected 3 channels, got {}",
                self.channels
            )));
        }
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| self.get(c, y, x).round().clamp(0.0, 255.0) as u8);
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        Ok(out)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?.save(path)?;
        Ok(())
    }

    /// Stacks equally shaped images into an NCHW batch tensor.
    pub fn stack(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or(Error::EmptyBatch)?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if !img.same_shape(first) {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    img.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::from_vec(
            [images.len(), first.channels, first.height, first.width],
            data,
        )
    }

    /// Splits an NCHW tensor back into images.
    pub fn unstack(t: &Tensor, range: PixelRange) -> Vec<Image> {
        let [n, c, h, w] = t.shape;
        (0..n)
            .map(|i| Image {
                height: h,
                width: w,
                channels: c,
                range,
                data: t.sample(i).to_vec(),
            })
            .collect()
    }
}
