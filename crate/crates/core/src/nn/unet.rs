use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{silu_tensor, silu_tensor_backward};
use super::{
    avg_pool2, avg_pool2_backward, concat_channels, join, silu, silu_backward, split_channels, timestep_embedding,
    upsample_nearest, upsample_nearest_backward, Conv2d, GroupNorm, Linear, Module, Param, Tensor,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub channels: usize,
    /// Feature widths at full, half and quarter resolution.
    pub widths: [usize; 3],
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            widths: [32, 64, 128],
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache {
    x: Tensor,
    a1: Tensor,
    s1: Tensor,
    h2: Tensor,
    a2: Tensor,
    s2: Tensor,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, temb_dim: usize, rng: &mut R) -> Self {
        Self {
            gn1: GroupNorm::for_channels(in_c),
            conv1: Conv2d::new(in_c, out_c, 3, rng),
            temb: Linear::new(temb_dim, out_c, rng),
            gn2: GroupNorm::for_channels(out_c),
            conv2: Conv2d::new(out_c, out_c, 3, rng),
            skip: (in_c != out_c).then(|| Conv2d::new(in_c, out_c, 1, rng)),
        }
    }

    fn forward(&self, x: Tensor, temb: &[f32]) -> (Tensor, ResCache) {
        let a1 = self.gn1.forward(&x);
        let s1 = silu_tensor(&a1);
        let mut h2 = self.conv1.forward(&s1);
        let proj = self.temb.forward(temb, x.n);
        let plane = h2.plane();
        for (b, row) in proj.chunks(self.temb.out_f).enumerate() {
            for (chunk, p) in h2.item_mut(b).chunks_mut(plane).zip(row) {
                chunk.iter_mut().for_each(|v| *v += p);
            }
        }
        let a2 = self.gn2.forward(&h2);
        let s2 = silu_tensor(&a2);
        let mut out = self.conv2.forward(&s2);
        match &self.skip {
            Some(conv) => out.add_assign(&conv.forward(&x)),
            None => out.add_assign(&x),
        }
        (out, ResCache { x, a1, s1, h2, a2, s2 })
    }

    /// Returns the input gradient and adds the embedding gradient into `dtemb`.
    fn backward(&mut self, c: &ResCache, dy: &Tensor, temb: &[f32], dtemb: &mut [f32]) -> Tensor {
        let ds2 = self.conv2.backward(&c.s2, dy);
        let da2 = silu_tensor_backward(&c.a2, &ds2);
        let dh2 = self.gn2.backward(&c.h2, &da2);
        let plane = dh2.plane();
        let dproj: Vec<f32> = (0..dh2.n)
            .flat_map(|b| dh2.item(b).chunks(plane).map(|ch| ch.iter().sum::<f32>()).collect::<Vec<_>>())
            .collect();
        let dt = self.temb.backward(temb, &dproj, dy.n);
        dtemb.iter_mut().zip(&dt).for_each(|(a, b)| *a += b);
        let ds1 = self.conv1.backward(&c.s1, &dh2);
        let da1 = silu_tensor_backward(&c.a1, &ds1);
        let mut dx = self.gn1.backward(&c.x, &da1);
        match &mut self.skip {
            Some(conv) => dx.add_assign(&conv.backward(&c.x, dy)),
            None => dx.add_assign(dy),
        }
        dx
    }
}

impl Module for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.gn1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.temb.visit(&join(prefix, "temb"), f);
        self.gn2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.gn1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.temb.visit_mut(&join(prefix, "temb"), f);
        self.gn2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}

/// Three-level noise-prediction UNet conditioned on the timestep.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    emb1: Linear,
    emb2: Linear,
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Activations kept by [`UNet::forward_train`] for the backward pass.
pub struct UNetCache {
    emb: Vec<f32>,
    z1: Vec<f32>,
    z1s: Vec<f32>,
    z2: Vec<f32>,
    temb: Vec<f32>,
    input: Tensor,
    res: Vec<ResCache>,
    skip_c: [usize; 2],
    d0: Tensor,
    pre_out: Tensor,
    act_out: Tensor,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Self {
        let [c0, c1, c2] = config.widths;
        let td = 4 * c0;
        let blocks = vec![
            ResBlock::new(c0, c0, td, rng),
            ResBlock::new(c0, c1, td, rng),
            ResBlock::new(c1, c2, td, rng),
            ResBlock::new(c2, c2, td, rng),
            ResBlock::new(c2 + c1, c1, td, rng),
            ResBlock::new(c1 + c0, c0, td, rng),
        ];
        Self {
            emb1: Linear::new(c0, td, rng),
            emb2: Linear::new(td, td, rng),
            conv_in: Conv2d::new(config.channels, c0, 3, rng),
            blocks,
            norm_out: GroupNorm::for_channels(c0),
            conv_out: Conv2d::zeroed(c0, config.channels, 3),
            config,
        }
    }

    pub fn forward(&self, x: &Tensor, timesteps: &[usize]) -> Tensor {
        self.forward_train(x, timesteps).0
    }

    pub fn forward_train(&self, x: &Tensor, timesteps: &[usize]) -> (Tensor, UNetCache) {
        assert_eq!(timesteps.len(), x.n, "one timestep per batch item");
        assert!(x.h.is_multiple_of(4) && x.w.is_multiple_of(4), "spatial dims must be multiples of 4");
        let n = x.n;
        let emb = timestep_embedding(timesteps, self.config.widths[0]);
        let z1 = self.emb1.forward(&emb, n);
        let z1s = silu(&z1);
        let z2 = self.emb2.forward(&z1s, n);
        let temb = silu(&z2);

        let mut res = Vec::with_capacity(6);
        let h = self.conv_in.forward(x);
        let (h0, c) = self.blocks[0].forward(h, &temb);
        res.push(c);
        let (h1, c) = self.blocks[1].forward(avg_pool2(&h0), &temb);
        res.push(c);
        let (m, c) = self.blocks[2].forward(avg_pool2(&h1), &temb);
        res.push(c);
        let (m, c) = self.blocks[3].forward(m, &temb);
        res.push(c);
        let skip_c = [h0.c, h1.c];
        let (d1, c) = self.blocks[4].forward(concat_channels(&upsample_nearest(&m, 2), &h1), &temb);
        res.push(c);
        let (d0, c) = self.blocks[5].forward(concat_channels(&upsample_nearest(&d1, 2), &h0), &temb);
        res.push(c);
        let pre_out = self.norm_out.forward(&d0);
        let act_out = silu_tensor(&pre_out);
        let out = self.conv_out.forward(&act_out);
        let cache = UNetCache {
            emb,
            z1,
            z1s,
            z2,
            temb,
            input: x.clone(),
            res,
            skip_c,
            d0,
            pre_out,
            act_out,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients for `dy = dL/d(output)`.
    pub fn backward(&mut self, cache: &UNetCache, dy: &Tensor) {
        let n = dy.n;
        let mut dtemb = vec![0.0f32; cache.temb.len()];
        let dact = self.conv_out.backward(&cache.act_out, dy);
        let dpre = silu_tensor_backward(&cache.pre_out, &dact);
        let dd0 = self.norm_out.backward(&cache.d0, &dpre);
        let dd0 = self.blocks[5].backward(&cache.res[5], &dd0, &cache.temb, &mut dtemb);
        let (du0, mut dh0) = split_channels(&dd0, dd0.c - cache.skip_c[0]);
        let dd1 = upsample_nearest_backward(&du0, 2);
        let dd1 = self.blocks[4].backward(&cache.res[4], &dd1, &cache.temb, &mut dtemb);
        let (du1, mut dh1) = split_channels(&dd1, dd1.c - cache.skip_c[1]);
        let dm = upsample_nearest_backward(&du1, 2);
        let dm = self.blocks[3].backward(&cache.res[3], &dm, &cache.temb, &mut dtemb);
        let dp1 = self.blocks[2].backward(&cache.res[2], &dm, &cache.temb, &mut dtemb);
        let pooled = avg_pool2_backward(&dh1, &dp1);
        dh1.add_assign(&pooled);
        let dp0 = self.blocks[1].backward(&cache.res[1], &dh1, &cache.temb, &mut dtemb);
        let pooled = avg_pool2_backward(&dh0, &dp0);
        dh0.add_assign(&pooled);
        let dh = self.blocks[0].backward(&cache.res[0], &dh0, &cache.temb, &mut dtemb);
        self.conv_in.backward(&cache.input, &dh);

        let dz2 = silu_backward(&cache.z2, &dtemb);
        let dz1s = self.emb2.backward(&cache.z1s, &dz2, n);
        let dz1 = silu_backward(&cache.z1, &dz1s);
        self.emb1.backward(&cache.emb, &dz1, n);
    }
}

impl Module for UNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.emb1.visit(&join(prefix, "time.0"), f);
        self.emb2.visit(&join(prefix, "time.1"), f);
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm_out.visit(&join(prefix, "norm_out"), f);
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.emb1.visit_mut(&join(prefix, "time.0"), f);
        self.emb2.visit_mut(&join(prefix, "time.1"), f);
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm_out.visit_mut(&join(prefix, "norm_out"), f);
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}
