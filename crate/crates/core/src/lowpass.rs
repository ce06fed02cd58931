//! Low-pass filtering by down/up-sampling and low/high frequency blending.
//!
//! `phi` downsamples by an integer factor `N` (to `ceil(dim / N)`) and
//! resamples back to the original size. `blend` keeps the low band of one
//! image and the high band of another. Boundaries replicate edge pixels.

use std::ops::Range;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampler {
    /// Keys cubic (a = -0.5) with the kernel widened by the scale factor when
    /// shrinking.
    #[default]
    BicubicAntialias,
    /// Block averaging down, pixel replication up. Makes `phi` idempotent.
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub factor: usize,
    #[serde(default)]
    pub resampler: Resampler,
}

impl FilterSpec {
    pub fn new(factor: usize, resampler: Resampler) -> Self {
        Self { factor, resampler }
    }

    pub fn bicubic(factor: usize) -> Self {
        Self::new(factor, Resampler::BicubicAntialias)
    }

    pub fn boxed(factor: usize) -> Self {
        Self::new(factor, Resampler::Box)
    }

    fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::InvalidConfig("filter factor N must be >= 1".into()));
        }
        Ok(())
    }
}

/// Low-pass filter `Phi_N`.
pub fn phi(image: &ImageTensor, spec: FilterSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let (h, w, _) = image.shape();
    if h < spec.factor || w < spec.factor {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            required: spec.factor,
        });
    }
    if spec.factor == 1 {
        return Ok(image.clone());
    }
    let (dh, dw) = (h.div_ceil(spec.factor), w.div_ceil(spec.factor));
    Ok(match spec.resampler {
        Resampler::Box => box_up(&box_down(image, spec.factor), spec.factor, h, w),
        Resampler::BicubicAntialias => resize(&resize(image, dh, dw), h, w),
    })
}

/// `Phi_N(low_src) + (I - Phi_N)(high_src)`.
pub fn blend(low_src: &ImageTensor, high_src: &ImageTensor, spec: FilterSpec) -> Result<ImageTensor> {
    low_src.ensure_same_shape(high_src)?;
    if spec.factor == 1 {
        spec.validate()?;
        phi(low_src, spec)?;
        return Ok(low_src.clone());
    }
    if spec.resampler == Resampler::Box {
        phi(low_src, spec)?;
        return Ok(box_blend(low_src, high_src, spec.factor));
    }
    let low = phi(low_src, spec)?;
    let high_low = phi(high_src, spec)?;
    // high + (low - high_low): exact when both sources coincide.
    let delta = low.sub(&high_low)?;
    high_src.add(&delta)
}

// Box sums run on a fixed dyadic grid in integers, so block means are
// exact and blending can hit a target sum to the last bit. Values below
// 2^(52 - GRID_BITS) in magnitude survive snapping unchanged.
const GRID_BITS: i32 = 48;

fn to_grid(v: f64) -> i128 {
    (v * 2f64.powi(GRID_BITS)).round() as i128
}

fn from_grid(k: i128) -> f64 {
    k as f64 * 2f64.powi(-GRID_BITS)
}

/// Nearest integer to `num / den`, ties away from zero.
fn div_round(num: i128, den: i128) -> i128 {
    let (q, r) = (num.div_euclid(den), num.rem_euclid(den));
    if 2 * r > den || (2 * r == den && num > 0) {
        q + 1
    } else {
        q
    }
}

type Block = (Range<usize>, Range<usize>);

fn blocks(h: usize, w: usize, factor: usize) -> impl Iterator<Item = Block> {
    (0..h.div_ceil(factor)).flat_map(move |by| {
        (0..w.div_ceil(factor)).map(move |bx| (by * factor..((by + 1) * factor).min(h), bx * factor..((bx + 1) * factor).min(w)))
    })
}

fn pixels((ys, xs): &Block) -> impl Iterator<Item = (usize, usize)> + '_ {
    ys.clone().flat_map(move |y| xs.clone().map(move |x| (y, x)))
}

fn block_sum(src: &Array3<f64>, block: &Block, ch: usize) -> i128 {
    pixels(block).map(|(y, x)| to_grid(src[[y, x, ch]])).sum()
}

/// Averages `factor x factor` blocks; trailing partial blocks average the
/// pixels they cover. Means are rounded to a 2^-48 grid.
pub fn box_down(image: &ImageTensor, factor: usize) -> ImageTensor {
    let (h, w, c) = image.shape();
    let src = image.data();
    let mut out = Array3::zeros((h.div_ceil(factor), w.div_ceil(factor), c));
    for block in blocks(h, w, factor) {
        let count = (block.0.len() * block.1.len()) as i128;
        let (by, bx) = (block.0.start / factor, block.1.start / factor);
        for ch in 0..c {
            out[[by, bx, ch]] = from_grid(div_round(block_sum(src, &block, ch), count));
        }
    }
    ImageTensor::from_array_unchecked(out)
}

/// Shifts every block of `high_src` so its grid sum equals that of
/// `low_src`. Blocks whose sums already agree are copied unchanged.
fn box_blend(low_src: &ImageTensor, high_src: &ImageTensor, factor: usize) -> ImageTensor {
    let (h, w, c) = high_src.shape();
    let (low, high) = (low_src.data(), high_src.data());
    let mut out = high.clone();
    for block in blocks(h, w, factor) {
        let count = (block.0.len() * block.1.len()) as i128;
        for ch in 0..c {
            let diff = block_sum(low, &block, ch) - block_sum(high, &block, ch);
            if diff == 0 {
                continue;
            }
            let (shift, extra) = (diff.div_euclid(count), diff.rem_euclid(count));
            for (k, (y, x)) in pixels(&block).enumerate() {
                let bump = shift + i128::from((k as i128) < extra);
                out[[y, x, ch]] = from_grid(to_grid(high[[y, x, ch]]) + bump);
            }
        }
    }
    ImageTensor::from_array_unchecked(out)
}

/// Replicates each pixel into a `factor x factor` block, cropped to `h x w`.
pub fn box_up(image: &ImageTensor, factor: usize, h: usize, w: usize) -> ImageTensor {
    let src = image.data();
    let c = image.channels();
    let out = Array3::from_shape_fn((h, w, c), |(y, x, ch)| src[[y / factor, x / factor, ch]]);
    ImageTensor::from_array_unchecked(out)
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-index taps `(source index, weight)` for a 1D bicubic resample.
fn resample_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let wgt = cubic((i as f64 - center) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(tap) => tap.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            let total: f64 = taps.iter().map(|(_, w)| w).sum();
            for tap in &mut taps {
                tap.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize with antialiasing when shrinking.
pub fn resize(image: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (h, w, c) = image.shape();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let src = image.data();
    let col_taps = resample_taps(w, out_w);
    let mut horiz = Array3::<f64>::zeros((h, out_w, c));
    for y in 0..h {
        for (ox, taps) in col_taps.iter().enumerate() {
            for ch in 0..c {
                horiz[[y, ox, ch]] = taps.iter().map(|&(x, wt)| wt * src[[y, x, ch]]).sum();
            }
        }
    }
    let row_taps = resample_taps(h, out_h);
    let mut out = Array3::zeros((out_h, out_w, c));
    for (oy, taps) in row_taps.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                out[[oy, x, ch]] = taps.iter().map(|&(y, wt)| wt * horiz[[y, x, ch]]).sum();
            }
        }
    }
    ImageTensor::from_array_unchecked(out)
}

/// Normalized truncated Gaussian kernel of size `2 * ceil(3 sigma) + 1`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur; `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(image: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w, c) = image.shape();
    let src = image.data();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut horiz = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                horiz[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * src[[y, clamp(x as isize + k as isize - radius, w), ch]])
                    .sum();
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * horiz[[clamp(y as isize + k as isize - radius, h), x, ch]])
                    .sum();
            }
        }
    }
    Ok(ImageTensor::from_array_unchecked(out))
}
