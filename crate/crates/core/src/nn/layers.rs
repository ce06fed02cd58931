use rand::Rng;

use super::tensor::{Param, Tensor};
use super::{gemm, join, Module};

/// Columns `x` of a row with `0 <= x + offset < w`, as a half-open span.
fn valid_span(w: usize, offset: isize) -> (usize, usize) {
    let w = w as isize;
    let x0 = (-offset).clamp(0, w);
    let x1 = (w - offset).clamp(x0, w);
    (x0 as usize, x1 as usize)
}

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = in_c * k * k;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            in_c,
            out_c,
            k,
            weight: Param::uniform(&[out_c, in_c, k, k], bound, rng),
            bias: Param::uniform(&[out_c], bound, rng),
        }
    }

    pub fn zeroed(in_c: usize, out_c: usize, k: usize) -> Self {
        Self {
            in_c,
            out_c,
            k,
            weight: Param::zeros(&[out_c, in_c, k, k]),
            bias: Param::zeros(&[out_c]),
        }
    }

    fn cols_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let pad = (self.k / 2) as isize;
        let plane = h * w;
        for ci in 0..self.in_c {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        let drow = &mut dst[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        // Valid output columns are those with 0 <= x + dx < w.
                        let (x0, x1) = valid_span(w, dx);
                        drow[..x0].fill(0.0);
                        drow[x1..].fill(0.0);
                        let s0 = (x0 as isize + dx) as usize;
                        drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let pad = (self.k / 2) as isize;
        let plane = h * w;
        for ci in 0..self.in_c {
            let dst = &mut dx[ci * plane..(ci + 1) * plane];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (oy, ox) = (ky as isize - pad, kx as isize - pad);
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[y * w..(y + 1) * w];
                        let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        let (x0, x1) = valid_span(w, ox);
                        let s0 = (x0 as isize + ox) as usize;
                        for (d, v) in drow[s0..s0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let plane = x.plane();
        let mut out = Tensor::zeros(x.n, self.out_c, x.h, x.w);
        let mut cols = if self.k == 1 { Vec::new() } else { vec![0.0; self.cols_len() * plane] };
        for b in 0..x.n {
            let y = out.item_mut(b);
            for (o, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(self.bias.value[o]);
            }
            let input: &[f32] = if self.k == 1 {
                x.item(b)
            } else {
                self.im2col(x.item(b), x.h, x.w, &mut cols);
                &cols
            };
            gemm(self.out_c, self.cols_len(), plane, &self.weight.value, false, input, false, y, 1.0);
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let plane = x.plane();
        let kk = self.cols_len();
        let mut dx = Tensor::zeros_like(x);
        let mut cols = if self.k == 1 { Vec::new() } else { vec![0.0; kk * plane] };
        let mut dcols = vec![0.0; kk * plane];
        for b in 0..x.n {
            let g = dy.item(b);
            for (o, chunk) in g.chunks(plane).enumerate() {
                self.bias.grad[o] += chunk.iter().sum::<f32>();
            }
            let input: &[f32] = if self.k == 1 {
                x.item(b)
            } else {
                self.im2col(x.item(b), x.h, x.w, &mut cols);
                &cols
            };
            gemm(self.out_c, plane, kk, g, false, input, true, &mut self.weight.grad, 1.0);
            if self.k == 1 {
                gemm(kk, self.out_c, plane, &self.weight.value, true, g, false, dx.item_mut(b), 0.0);
            } else {
                gemm(kk, self.out_c, plane, &self.weight.value, true, g, false, &mut dcols, 0.0);
                self.col2im(&dcols, x.h, x.w, dx.item_mut(b));
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Fully connected layer over `(batch, features)` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_f: usize, out_f: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_f as f32).sqrt();
        Self {
            in_f,
            out_f,
            weight: Param::uniform(&[out_f, in_f], bound, rng),
            bias: Param::uniform(&[out_f], bound, rng),
        }
    }

    pub fn forward(&self, x: &[f32], batch: usize) -> Vec<f32> {
        assert_eq!(x.len(), batch * self.in_f);
        let mut out: Vec<f32> = (0..batch).flat_map(|_| self.bias.value.iter().copied()).collect();
        gemm(batch, self.in_f, self.out_f, x, false, &self.weight.value, true, &mut out, 1.0);
        out
    }

    pub fn backward(&mut self, x: &[f32], dy: &[f32], batch: usize) -> Vec<f32> {
        for row in dy.chunks(self.out_f) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        gemm(self.out_f, batch, self.in_f, dy, true, x, false, &mut self.weight.grad, 1.0);
        let mut dx = vec![0.0; batch * self.in_f];
        gemm(batch, self.out_f, self.in_f, dy, false, &self.weight.value, false, &mut dx, 0.0);
        dx
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "channels must divide into groups");
        Self {
            groups,
            channels,
            eps: 1e-5,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
        }
    }

    /// Eight groups when possible, otherwise the largest divisor below it.
    pub fn for_channels(channels: usize) -> Self {
        let groups = (1..=8).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        Self::new(groups, channels)
    }

    fn stats(&self, group: &[f32]) -> (f32, f32) {
        let m = group.len() as f64;
        let mean = group.iter().map(|&v| f64::from(v)).sum::<f64>() / m;
        let var = group.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / m;
        (mean as f32, (1.0 / (var + f64::from(self.eps)).sqrt()) as f32)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels);
        let plane = x.plane();
        let cpg = self.channels / self.groups;
        let mut out = Tensor::zeros_like(x);
        for b in 0..x.n {
            let src = x.item(b);
            let dst = out.item_mut(b);
            for g in 0..self.groups {
                let range = g * cpg * plane..(g + 1) * cpg * plane;
                let (mean, inv) = self.stats(&src[range.clone()]);
                for c in g * cpg..(g + 1) * cpg {
                    let (ga, be) = (self.gamma.value[c], self.beta.value[c]);
                    for i in c * plane..(c + 1) * plane {
                        dst[i] = (src[i] - mean) * inv * ga + be;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let plane = x.plane();
        let cpg = self.channels / self.groups;
        let mut dx = Tensor::zeros_like(x);
        let mut xhat = vec![0.0f32; cpg * plane];
        let mut dxhat = vec![0.0f32; cpg * plane];
        for b in 0..x.n {
            let src = x.item(b);
            let g_out = dy.item(b);
            for g in 0..self.groups {
                let base = g * cpg * plane;
                let (mean, inv) = self.stats(&src[base..base + cpg * plane]);
                let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
                for lc in 0..cpg {
                    let c = g * cpg + lc;
                    let ga = self.gamma.value[c];
                    let (mut dg, mut db) = (0.0f32, 0.0f32);
                    for p in 0..plane {
                        let i = lc * plane + p;
                        let xh = (src[base + i] - mean) * inv;
                        let d = g_out[base + i];
                        xhat[i] = xh;
                        dxhat[i] = d * ga;
                        dg += d * xh;
                        db += d;
                        sum_d += f64::from(dxhat[i]);
                        sum_dx += f64::from(dxhat[i] * xh);
                    }
                    self.gamma.grad[c] += dg;
                    self.beta.grad[c] += db;
                }
                let m = (cpg * plane) as f64;
                let (mean_d, mean_dx) = ((sum_d / m) as f32, (sum_dx / m) as f32);
                let dst = dx.item_mut(b);
                for i in 0..cpg * plane {
                    dst[base + i] = inv * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                }
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

pub(crate) fn silu_tensor(x: &Tensor) -> Tensor {
    Tensor::from_vec(x.n, x.c, x.h, x.w, silu(&x.data))
}

pub(crate) fn silu_tensor_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::from_vec(x.n, x.c, x.h, x.w, silu_backward(&x.data, &dy.data))
}

/// 2x2 mean pooling; spatial dims must be even.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "pooling needs even dims");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for (src, dst) in x.data.chunks(x.plane()).zip(out.data.chunks_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros_like(x);
    let (oh, ow) = (dy.h, dy.w);
    for (g, dst) in dy.data.chunks(oh * ow).zip(dx.data.chunks_mut(x.plane())) {
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g[y * ow + xx];
                let i = 2 * y * x.w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + x.w] = v;
                dst[i + x.w + 1] = v;
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (oh, ow) = (x.h * factor, x.w * factor);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for (src, dst) in x.data.chunks(x.plane()).zip(out.data.chunks_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / factor) * x.w + xx / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (dy.h / factor, dy.w / factor);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (g, dst) in dy.data.chunks(dy.plane()).zip(dx.data.chunks_mut(h * w)) {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / factor) * w + xx / factor] += g[y * dy.w + xx];
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w);
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.item_mut(i);
        dst[..a.item_len()].copy_from_slice(a.item(i));
        dst[a.item_len()..].copy_from_slice(b.item(i));
    }
    out
}

pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(x.n, first, x.h, x.w);
    let mut b = Tensor::zeros(x.n, x.c - first, x.h, x.w);
    let cut = first * x.plane();
    for i in 0..x.n {
        let src = x.item(i);
        a.item_mut(i).copy_from_slice(&src[..cut]);
        b.item_mut(i).copy_from_slice(&src[cut..]);
    }
    (a, b)
}

/// Sinusoidal embedding `[sin(t f_i), cos(t f_i)]` with geometric frequencies.
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; timesteps.len() * dim];
    for (row, &t) in out.chunks_mut(dim).zip(timesteps) {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.sin() as f32;
            row[half + i] = arg.cos() as f32;
        }
    }
    out
}
