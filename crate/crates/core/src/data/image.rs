use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Planar RGB image with values in [0, 1], laid out 3 × H × W.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image must be non-empty".into()));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image buffer of {} values for 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; Self::CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..][..self.height * self.width]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..][..n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("mse between differently sized images".into()));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..Self::CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        for c in 0..Self::CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, self.height - 1 - y, x));
                }
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centres and edge clamping. An exact
    /// ×0.5 resize reduces to 2×2 block averaging.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("resize to an empty image".into()));
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut out = Self::filled(height, width, 0.0);
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = taps(x, sx, self.width);
                for c in 0..Self::CHANNELS {
                    let top = self.get(c, y0, x0) as f64 * (1.0 - fx) + self.get(c, y0, x1) as f64 * fx;
                    let bot = self.get(c, y1, x0) as f64 * (1.0 - fx) + self.get(c, y1, x1) as f64 * fx;
                    out.set(c, y, x, (top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
        Ok(out)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(h, w, 0.0);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..Self::CHANNELS {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..Self::CHANNELS {
                let v = self.get(c, y as usize, x as usize).clamp(0.0, 1.0);
                px[c] = (v * 255.0).round() as u8;
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }

    /// (1, 3, H, W) tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (1, Self::CHANNELS, self.height, self.width), &Device::Cpu)?
                .to_dtype(dtype)?,
        )
    }
}

/// Stacks equally sized images into a (B, 3, H, W) tensor.
pub fn stack_images(images: &[ImageTensor], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape("batch images differ in size".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), ImageTensor::CHANNELS, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let data = (0..3 * h * w).map(|i| (i % 17) as f32 / 16.0).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn half_scale_bilinear_is_block_mean() {
        let img = ramp(6, 8);
        let half = img.resize_bilinear(3, 4).unwrap();
        for c in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    let m = (img.get(c, 2 * y, 2 * x)
                        + img.get(c, 2 * y + 1, 2 * x)
                        + img.get(c, 2 * y, 2 * x + 1)
                        + img.get(c, 2 * y + 1, 2 * x + 1))
                        / 4.0;
                    assert!((half.get(c, y, x) - m).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(5, 7);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data = (0..3 * 4 * 5).map(|i| (i * 4) as f32 / 255.0).collect();
        let img = ImageTensor::new(4, 5, data).unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn crop_outside_bounds_is_rejected() {
        assert!(ramp(4, 4).crop(1, 1, 4, 4).is_err());
    }
}
