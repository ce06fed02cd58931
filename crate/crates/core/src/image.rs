//! Floating-point image container shared by every stage of the pipeline.
//!
//! Pixels are stored as `f64` in height x width x channel order with a fixed
//! nominal value range of `[-1, 1]`. 8-bit storage maps `0 -> -1.0` and
//! `255 -> +1.0` linearly.

use std::path::Path;

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result, Shape};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wraps an `(height, width, channels)` array, rejecting empty or
    /// non-finite data.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Empty(format!("image with shape {h}x{w}x{c}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { data })
    }

    pub(crate) fn from_array_unchecked(data: Array3<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array3::from_shape_vec((height, width, channels), values).map_err(|_| {
            Error::InvalidConfig(format!("buffer length does not match {height}x{width}x{channels}"))
        })?;
        Self::new(data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(value.is_finite());
        Self::from_array_unchecked(Array3::from_elem((height, width, channels), value))
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn from_fn(
        shape: Shape,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn(shape, |(y, x, c)| f(y, x, c)))
    }

    /// Independent standard-normal sample per pixel and channel.
    pub fn standard_normal<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self::from_array_unchecked(Array3::from_shape_vec(shape, values).expect("length matches shape"))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> Shape {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[[y, x, c]]
    }

    /// Row-major `(y, x, c)` values.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied()
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.shape(),
            });
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        other.ensure_shape(self.shape())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        Self::from_array_unchecked(self.data.mapv(f))
    }

    /// Elementwise combination of two equally shaped images.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<ImageTensor> {
        self.ensure_same_shape(other)?;
        let mut out = Array3::zeros(self.shape());
        Zip::from(&mut out)
            .and(&self.data)
            .and(&other.data)
            .for_each(|o, &a, &b| *o = f(a, b));
        Ok(Self::from_array_unchecked(out))
    }

    pub fn add(&self, other: &ImageTensor) -> Result<ImageTensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ImageTensor) -> Result<ImageTensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> ImageTensor {
        self.map(|v| v * k)
    }

    /// Clamps into the nominal `[-1, 1]` range.
    pub fn clamped(&self) -> ImageTensor {
        self.map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let total: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(total / self.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Converts an interleaved 8-bit buffer (row-major, channels last).
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let values = bytes.iter().map(|&b| u8_to_unit(b)).collect();
        Self::from_vec(height, width, channels, values)
    }

    /// Quantizes to 8-bit with rounding; out-of-range values saturate.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| unit_to_u8(v)).collect()
    }

    /// Maps onto the 0..255 scale without quantization.
    pub fn to_255(&self) -> Vec<f64> {
        self.data.iter().map(|&v| (v + 1.0) * 127.5).collect()
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Result<Self> {
        let rgb = img.to_rgb8();
        Self::from_u8(rgb.height() as usize, rgb.width() as usize, 3, rgb.as_raw())
    }

    pub fn to_dynamic(&self) -> image::DynamicImage {
        let (h, w, c) = self.shape();
        let bytes = self.to_u8();
        match c {
            1 => image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized"),
            ),
            3 => image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized"),
            ),
            _ => {
                // Only the first channel is representable.
                let grey = bytes.chunks(c).map(|px| px[0]).collect();
                image::DynamicImage::ImageLuma8(
                    image::GrayImage::from_raw(w as u32, h as u32, grey).expect("buffer sized"),
                )
            }
        }
    }

    /// Decodes any PNG/JPEG file into a 3-channel image.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes).map_err(|e| Error::ImageCodec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_dynamic(&img)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_dynamic()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::ImageCodec {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

pub fn u8_to_unit(b: u8) -> f64 {
    f64::from(b) / 127.5 - 1.0
}

pub fn unit_to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}
