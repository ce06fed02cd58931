use ndarray::Array3;
use rand::Rng;

use crate::image::ImageTensor;

/// Dense NCHW `f32` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor buffer length");
        Self { n, c, h, w, data }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.n, other.c, other.h, other.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, b: usize) -> &[f32] {
        let len = self.item_len();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f32] {
        let len = self.item_len();
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_dims(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }
}

/// Trainable parameter with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = rng.random_range(-bound..=bound);
        }
        p
    }
}

impl Tensor {
    /// Stacks same-shaped HWC images into an NCHW batch.
    pub fn from_images(images: &[&ImageTensor]) -> Tensor {
        let (h, w, c) = images.first().map(|i| i.shape()).unwrap_or((0, 0, 0));
        let mut out = Tensor::zeros(images.len(), c, h, w);
        for (b, img) in images.iter().enumerate() {
            assert_eq!(img.shape(), (h, w, c), "batch images must share a shape");
            let dst = out.item_mut(b);
            for ((y, x, ch), v) in img.data().indexed_iter() {
                dst[(ch * h + y) * w + x] = *v as f32;
            }
        }
        out
    }

    pub fn to_images(&self) -> Vec<ImageTensor> {
        let (c, h, w) = (self.c, self.h, self.w);
        (0..self.n)
            .map(|b| {
                let src = self.item(b);
                let data = Array3::from_shape_fn((h, w, c), |(y, x, ch)| f64::from(src[(ch * h + y) * w + x]));
                ImageTensor::from_array_unchecked(data)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_layout_round_trip() {
        let a = ImageTensor::from_fn((3, 4, 2), |y, x, c| (y * 8 + x * 2 + c) as f64 / 32.0 - 0.5).unwrap();
        let b = a.map(|v| -v);
        let t = Tensor::from_images(&[&a, &b]);
        assert_eq!((t.n, t.c, t.h, t.w), (2, 2, 3, 4));
        assert_eq!(t.data[4 + 1], a.get(1, 1, 0) as f32);
        assert_eq!(t.to_images(), vec![a, b]);
    }
}
