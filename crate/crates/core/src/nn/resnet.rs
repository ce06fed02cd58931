use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{silu_tensor, silu_tensor_backward};
use super::{join, upsample_nearest, upsample_nearest_backward, Conv2d, Module, Param, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub channels: usize,
    pub width: usize,
    pub blocks: usize,
    /// Integer output upscaling; 1 keeps the input size.
    pub upscale: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            width: 32,
            blocks: 3,
            upscale: 1,
        }
    }
}

/// Plain residual image-to-image network with a global skip connection.
#[derive(Clone, Debug)]
pub struct ResNet {
    pub config: ResNetConfig,
    conv_in: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    conv_up: Option<Conv2d>,
    conv_out: Conv2d,
}

pub struct ResNetCache {
    input: Tensor,
    block_in: Vec<Tensor>,
    block_mid: Vec<Tensor>,
    up_in: Option<(Tensor, Tensor)>,
    head_in: Tensor,
}

impl ResNet {
    pub fn new<R: Rng + ?Sized>(config: ResNetConfig, rng: &mut R) -> Self {
        let (c, w) = (config.channels, config.width);
        let blocks = (0..config.blocks)
            .map(|_| (Conv2d::new(w, w, 3, rng), Conv2d::new(w, w, 3, rng)))
            .collect();
        let conv_up = (config.upscale > 1).then(|| Conv2d::new(w, w, 3, rng));
        let mut conv_out = Conv2d::new(w, c, 3, rng);
        conv_out.weight.value.iter_mut().for_each(|v| *v *= 0.1);
        conv_out.bias.value.fill(0.0);
        Self {
            conv_in: Conv2d::new(c, w, 3, rng),
            blocks,
            conv_up,
            conv_out,
            config,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, ResNetCache) {
        let mut h = self.conv_in.forward(x);
        let mut block_in = Vec::new();
        let mut block_mid = Vec::new();
        for (c1, c2) in &self.blocks {
            let mid = c1.forward(&h);
            let delta = c2.forward(&silu_tensor(&mid));
            block_in.push(h.clone());
            block_mid.push(mid);
            h.add_assign(&delta);
        }
        let mut up_in = None;
        if let Some(conv) = &self.conv_up {
            let up = upsample_nearest(&h, self.config.upscale);
            let pre = conv.forward(&up);
            h = silu_tensor(&pre);
            up_in = Some((up, pre));
        }
        let mut out = self.conv_out.forward(&h);
        out.add_assign(&upsample_nearest(x, self.config.upscale));
        let cache = ResNetCache {
            input: x.clone(),
            block_in,
            block_mid,
            up_in,
            head_in: h,
        };
        (out, cache)
    }

    pub fn backward(&mut self, cache: &ResNetCache, dy: &Tensor) {
        let mut dh = self.conv_out.backward(&cache.head_in, dy);
        if let (Some(conv), Some((up, pre))) = (&mut self.conv_up, &cache.up_in) {
            let dpre = silu_tensor_backward(pre, &dh);
            let dup = conv.backward(up, &dpre);
            dh = upsample_nearest_backward(&dup, self.config.upscale);
        }
        for (i, (c1, c2)) in self.blocks.iter_mut().enumerate().rev() {
            let mid = &cache.block_mid[i];
            let ds = c2.backward(&silu_tensor(mid), &dh);
            let dmid = silu_tensor_backward(mid, &ds);
            let dx = c1.backward(&cache.block_in[i], &dmid);
            dh.add_assign(&dx);
        }
        self.conv_in.backward(&cache.input, &dh);
    }
}

impl Module for ResNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.visit(&join(prefix, &format!("blocks.{i}.conv1")), f);
            b.visit(&join(prefix, &format!("blocks.{i}.conv2")), f);
        }
        if let Some(c) = &self.conv_up {
            c.visit(&join(prefix, "conv_up"), f);
        }
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        for (i, (a, b)) in self.blocks.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("blocks.{i}.conv1")), f);
            b.visit_mut(&join(prefix, &format!("blocks.{i}.conv2")), f);
        }
        if let Some(c) = &mut self.conv_up {
            c.visit_mut(&join(prefix, "conv_up"), f);
        }
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn gradients_match_finite_differences() {
        for upscale in [1, 2] {
            let cfg = ResNetConfig { channels: 2, width: 4, blocks: 2, upscale };
            let mut net = ResNet::new(cfg, &mut seeded(8));
            let x = Tensor::from_vec(1, 2, 4, 4, (0..32).map(|i| (i as f32 * 0.37).sin()).collect());
            let (y, cache) = net.forward_train(&x);
            assert_eq!((y.h, y.w), (4 * upscale, 4 * upscale));
            let r: Vec<f32> = (0..y.data.len()).map(|i| (i as f32 * 1.3).cos()).collect();
            net.backward(&cache, &Tensor::from_vec(1, 2, y.h, y.w, r.clone()));
            let loss = |n: &ResNet| -> f64 {
                n.forward(&x).data.iter().zip(&r).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
            };
            let mut grads = Vec::new();
            net.visit("", &mut |name, p| grads.push((name.to_string(), p.grad[0])));
            for (name, g) in grads {
                let bump = |d: f32| {
                    let mut m = net.clone();
                    m.visit_mut("", &mut |n2, p| {
                        if n2 == name {
                            p.value[0] += d;
                        }
                    });
                    loss(&m)
                };
                let num = (bump(1e-2) - bump(-1e-2)) / 2e-2;
                assert!((num - f64::from(g)).abs() < 1e-2 * (1.0 + num.abs()), "{name}: {num} vs {g}");
            }
        }
    }
}
