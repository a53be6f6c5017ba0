use super::{Module, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Moment buffers follow the module's visit order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real, M: Module<T> + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut slot = 0;
        let moments = &mut self.moments;
        model.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if moments.len() <= slot {
                moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
            }
            let (m, v) = &mut moments[slot];
            for i in 0..p.len() {
                let g = p.grad[i].f64();
                let mut w = p.value[i].f64();
                w -= c.lr * c.weight_decay * w;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w -= c.lr * mhat / (vhat.sqrt() + c.eps);
                p.value[i] = T::of(w);
            }
            slot += 1;
        });
    }
}

pub fn zero_grad<T: Real, M: Module<T> + ?Sized>(model: &mut M) {
    model.visit_mut("", &mut |_, p| p.zero_grad());
}

/// L2 norm over all trainable gradients.
pub fn grad_norm<T: Real, M: Module<T> + ?Sized>(model: &M) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |_, p| {
        if p.trainable {
            sq += p.grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Real, M: Module<T> + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        model.visit_mut("", &mut |_, p| {
            if p.trainable {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        });
    }
    norm
}
