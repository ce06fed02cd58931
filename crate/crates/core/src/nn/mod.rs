//! Minimal CPU convolutional network toolkit used by the toy denoiser and the
//! baseline enhancer.
//!
//! Layers keep explicit forward/backward passes; training code holds on to the
//! activations a backward pass needs. Convolutions are im2col + sgemm.

mod checkpoint;
mod layers;
mod optim;
mod resnet;
mod tensor;
mod unet;

pub use checkpoint::{load_params, read_metadata, save_params};
pub use layers::{
    avg_pool2, avg_pool2_backward, concat_channels, silu, silu_backward, split_channels, timestep_embedding,
    upsample_nearest, upsample_nearest_backward, Conv2d, GroupNorm, Linear,
};
pub use optim::{clip_grad_norm, zero_grad, Adam};
pub use resnet::{ResNet, ResNetConfig};
pub use tensor::{Param, Tensor};
pub use unet::{UNet, UNetConfig};

/// Parameter traversal in a fixed, name-addressed order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Row-major `C = A * B + beta * C` with optional transposition of the stored
/// operands. `a` is `m x k` (or `k x m` when `a_t`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transpositions_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let mut naive = vec![0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f32> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0f32; m * n];
                gemm(m, k, n, aa, a_t, bb, b_t, &mut c, 0.0);
                assert_eq!(c, naive);
            }
        }
    }
}
