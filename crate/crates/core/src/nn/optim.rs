use super::Module;

/// Adam with bias correction. State is indexed by parameter visit order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        let moments = &mut self.moments;
        let mut idx = 0;
        model.visit_mut("", &mut |_, p| {
            if moments.len() <= idx {
                moments.push((vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            }
            let (m, v) = &mut moments[idx];
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

pub fn zero_grad<M: Module + ?Sized>(model: &mut M) {
    model.visit_mut("", &mut |_, p| p.grad.fill(0.0));
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<M: Module + ?Sized>(model: &mut M, max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    model.visit("", &mut |_, p| {
        sq += p.grad.iter().map(|g| f64::from(*g) * f64::from(*g)).sum::<f64>();
    });
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let k = max_norm / norm;
        model.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= k));
    }
    norm
}
