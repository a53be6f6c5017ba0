use super::{join_name, Module, Param, Real, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(&[channels], T::zero()),
            running_var: Param::buffer(&[channels], T::one()),
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Inference mode: normalise with running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels(), "batch-norm channel mismatch");
        let hw = h * w;
        let mut out = x.clone();
        for ch in 0..c {
            let inv = T::one() / (self.running_var.value[ch] + T::of(EPS)).sqrt();
            let scale = self.gamma.value[ch] * inv;
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                out.data_mut()[off..off + hw].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    /// Training mode: normalise with batch statistics and update running estimates.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BatchNormCache<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels(), "batch-norm channel mismatch");
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(c);
        let m = T::of(MOMENTUM);
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                sum += x.data()[off..off + hw].iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                sq += x.data()[off..off + hw].iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / count;
            let inv = T::of(1.0 / (var + EPS).sqrt());
            let mean_t = T::of(mean);
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x.data()[i] - mean_t) * inv;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = g * xh + bt;
                }
            }
            inv_std.push(inv);
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_mean.value[ch] = (T::one() - m) * self.running_mean.value[ch] + m * mean_t;
            self.running_var.value[ch] = (T::one() - m) * self.running_var.value[ch] + m * T::of(unbiased);
        }
        (out, BatchNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, g: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = g.shape();
        let hw = h * w;
        let count = T::of((n * hw) as f64);
        let mut dx = Tensor::zeros(g.shape());
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    sum_g += g.data()[i];
                    sum_gx += g.data()[i] * cache.xhat.data()[i];
                }
            }
            self.gamma.grad[ch] += sum_gx;
            self.beta.grad[ch] += sum_g;
            let k = self.gamma.value[ch] * cache.inv_std[ch] / count;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    dx.data_mut()[i] = k * (count * g.data()[i] - sum_g - cache.xhat.data()[i] * sum_gx);
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join_name(prefix, "gamma"), &self.gamma);
        f(&join_name(prefix, "beta"), &self.beta);
        f(&join_name(prefix, "running_mean"), &self.running_mean);
        f(&join_name(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join_name(prefix, "gamma"), &mut self.gamma);
        f(&join_name(prefix, "beta"), &mut self.beta);
        f(&join_name(prefix, "running_mean"), &mut self.running_mean);
        f(&join_name(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_forward_has_zero_mean_unit_variance() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Tensor::from_vec([3, 2, 2, 2], (0..24).map(|i| (i as f64 * 1.7).sin() * 3.0 + 1.0).collect());
        let (y, _) = bn.forward_train(&x);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.data()[(b * 2 + ch) * 4..(b * 2 + ch) * 4 + 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let x = Tensor::from_vec([2, 2, 2, 3], (0..24).map(|i| (i as f64 * 0.9).cos()).collect());
        let gy: Vec<f64> = (0..24).map(|i| (i as f64 * 0.41).sin()).collect();
        let loss = |bn: &BatchNorm2d<f64>, x: &Tensor<f64>| -> f64 {
            let (y, _) = bn.clone().forward_train(x);
            y.data().iter().zip(&gy).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = bn.clone().forward_train(&x);
        let dx = bn.backward(&cache, &Tensor::from_vec(x.shape(), gy.clone()));
        let h = 1e-6;
        for idx in 0..24 {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7, "{idx}: {fd} vs {}", dx.data()[idx]);
        }
        let mut bp = bn.clone();
        bp.gamma.value[1] += h;
        let mut bm = bn.clone();
        bm.gamma.value[1] -= h;
        let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h);
        assert!((fd - bn.gamma.grad[1]).abs() < 1e-7);
    }
}
