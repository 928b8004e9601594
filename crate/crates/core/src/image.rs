//! RGB rasters with floating-point samples.
//!
//! Samples are stored row-major, interleaved `H x W x 3`. Natural images hold
//! values in `[0, 1]`; Laplacian residuals may be any real value.
//! 8-bit conversion uses `v / 255` on load and `round(clamp(v) * 255)` on save.

use std::path::Path;

use image::{imageops::FilterType, DynamicImage, Rgb, RgbImage};
use lapstyle_autograd::{Real, Tensor};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Dimension(format!(
                "{height}x{width} RGB image needs {} samples, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Self { height, width, data: vec![value; height * width * CHANNELS] }
    }

    /// Builds an image from `f(y, x, channel)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    /// One channel as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(CHANNELS).copied().collect()
    }

    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>; CHANNELS]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for i in 0..height * width {
            for p in planes {
                data.push(p[i]);
            }
        }
        Self { height, width, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, other: &Self, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { height: self.height, width: self.width, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self.zip_with(other, "max_abs_diff", |a, b| (a - b).abs())?.data.iter().fold(0.0, |m, &v| m.max(v)))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut data = vec![T::zero(); CHANNELS * hw];
        for (i, px) in self.data.chunks(CHANNELS).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * hw + i] = T::from_f64_lossy(v);
            }
        }
        Tensor::new(&[1, CHANNELS, self.height, self.width], data).expect("image tensor shape")
    }

    /// Batch item `n` of an `N x 3 x H x W` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (bn, c, h, w) = t.dims4()?;
        if c != CHANNELS || n >= bn {
            return Err(Error::Dimension(format!("cannot read image {n} from tensor {:?}", t.shape())));
        }
        let hw = h * w;
        let base = n * c * hw;
        let mut data = Vec::with_capacity(c * hw);
        for i in 0..hw {
            for ch in 0..c {
                data.push(t.data()[base + ch * hw + i].as_f64());
            }
        }
        Self::new(h, w, data)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self { height: h as usize, width: w as usize, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.data.chunks(CHANNELS).enumerate() {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel((i % self.width) as u32, (i / self.width) as u32, Rgb([q(px[0]), q(px[1]), q(px[2])]));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Loads an image, scales its shorter side to `resolution` and center-crops
    /// to `resolution x resolution`.
    pub fn load_square(path: impl AsRef<Path>, resolution: usize) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Ok(resize_crop(&img, resolution))
    }

    /// Loads an image scaled and center-cropped to exactly `height x width`.
    pub fn load_fill(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let (w, h) = (width as u32, height as u32);
        if (img.width(), img.height()) == (w, h) {
            return Ok(Self::from_rgb8(&img.to_rgb8()));
        }
        Ok(Self::from_rgb8(&img.resize_to_fill(w, h, FilterType::Triangle).to_rgb8()))
    }

    /// Saves as 8-bit PNG/JPEG (by extension), clamping to `[0, 1]`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Saves a residual image for inspection, shifted by +0.5 before clamping.
    pub fn save_residual(&self, path: impl AsRef<Path>) -> Result<()> {
        self.map(|v| v + 0.5).save(path)
    }
}

pub fn resize_crop(img: &DynamicImage, resolution: usize) -> Image {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let target = resolution as u32;
    let (nw, nh) = if w <= h {
        (target, ((u64::from(h) * u64::from(target) + u64::from(w) / 2) / u64::from(w)).max(u64::from(target)) as u32)
    } else {
        (((u64::from(w) * u64::from(target) + u64::from(h) / 2) / u64::from(h)).max(u64::from(target)) as u32, target)
    };
    let resized = if (nw, nh) == (w, h) { rgb } else { image::imageops::resize(&rgb, nw, nh, FilterType::Triangle) };
    let x0 = (nw - target) / 2;
    let y0 = (nh - target) / 2;
    let cropped = image::imageops::crop_imm(&resized, x0, y0, target, target).to_image();
    Image::from_rgb8(&cropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_sample_count() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
        assert!(Image::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(3, 5, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), &[1, 3, 3, 5]);
        assert_eq!(t.data()[2 * 15 + 5 + 4], 142.0);
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn eight_bit_quantization_is_within_half_lsb() {
        let img = Image::from_fn(4, 4, |y, x, c| ((y * 4 + x) as f64 * 0.061 + c as f64 * 0.1) % 1.0);
        let back = Image::from_rgb8(&img.to_rgb8());
        assert!(img.max_abs_diff(&back).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn resize_crop_makes_exact_square() {
        let src = DynamicImage::ImageRgb8(RgbImage::from_pixel(800, 600, Rgb([10, 20, 30])));
        let out = resize_crop(&src, 512);
        assert_eq!(out.dims(), (512, 512));
        let tall = DynamicImage::ImageRgb8(RgbImage::from_pixel(33, 70, Rgb([1, 2, 3])));
        assert_eq!(resize_crop(&tall, 16).dims(), (16, 16));
    }
}
