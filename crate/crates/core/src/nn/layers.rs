use rand::Rng;

use super::real::gemm;
use super::{join_name, Module, Param, Real, Tensor};

/// Affine map on `[n, in, 1, 1]` feature tensors.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_features: usize,
    out_features: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::kaiming_uniform(&[out_features, in_features], in_features, gain, rng),
            bias: Param::zeros(&[out_features]),
            in_features,
            out_features,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|v| *v = T::zero());
        self
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.n();
        assert_eq!(x.sample_len(), self.in_features, "linear input width");
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        gemm::nt(n, self.in_features, self.out_features, x.data(), &self.weight.value, T::zero(), out.data_mut());
        for row in out.data_mut().chunks_mut(self.out_features) {
            row.iter_mut().zip(&self.bias.value).for_each(|(v, &b)| *v += b);
        }
        out
    }

    /// `x` is the forward input; accumulates parameter gradients.
    pub fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        let n = x.n();
        gemm::tn(self.out_features, n, self.in_features, g.data(), x.data(), T::one(), &mut self.weight.grad);
        for row in g.data().chunks(self.out_features) {
            self.bias.grad.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
        }
        self.backward_input(g, x.shape())
    }

    pub fn backward_input(&self, g: &Tensor<T>, input_shape: [usize; 4]) -> Tensor<T> {
        let n = g.n();
        let mut dx = Tensor::zeros([n, self.in_features, 1, 1]);
        gemm::nn(n, self.out_features, self.in_features, g.data(), &self.weight.value, T::zero(), dx.data_mut());
        dx.reshape(input_shape)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join_name(prefix, "weight"), &self.weight);
        f(&join_name(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// `x` is the activation input.
pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>, slope: T) -> Tensor<T> {
    x.zip_map(g, |v, gv| if v > T::zero() { gv } else { gv * slope })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// `y` is the sigmoid output.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    y.zip_map(g, |s, gv| gv * s * (T::one() - s))
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v / (T::one() + (-v).exp()))
}

/// `x` is the activation input.
pub fn silu_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    x.zip_map(g, |v, gv| {
        let s = T::one() / (T::one() + (-v).exp());
        gv * (s + v * s * (T::one() - s))
    })
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let inv = T::one() / T::of(hw as f64);
    let data = x.data().chunks(hw).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Real>(g: &Tensor<T>, input_shape: [usize; 4]) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::one() / T::of(hw as f64);
    let mut data = Vec::with_capacity(g.len() * hw);
    for &gv in g.data() {
        data.extend(std::iter::repeat_n(gv * inv, hw));
    }
    Tensor::from_vec(input_shape, data)
}

/// Source index pairs and weights for 2× bilinear upsampling with half-pixel centres.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn upsample_bilinear2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (2 * h, 2 * w);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut rows = vec![T::zero(); h * wo];
    for (plane, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)) {
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                rows[y * wo + ox] = src[i0] * T::of(w0) + src[i1] * T::of(w1);
            }
        }
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            let (w0, w1) = (T::of(w0), T::of(w1));
            for ox in 0..wo {
                dst[oy * wo + ox] = rows[i0 * wo + ox] * w0 + rows[i1 * wo + ox] * w1;
            }
        }
    }
    out
}

pub fn upsample_bilinear2x_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let [n, c, ho, wo] = g.shape();
    let (h, w) = (ho / 2, wo / 2);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let mut rows = vec![T::zero(); h * wo];
    for (gp, dst) in g.data().chunks(ho * wo).zip(dx.data_mut().chunks_mut(h * w)) {
        rows.iter_mut().for_each(|v| *v = T::zero());
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            let (w0, w1) = (T::of(w0), T::of(w1));
            for ox in 0..wo {
                let gv = gp[oy * wo + ox];
                rows[i0 * wo + ox] += gv * w0;
                rows[i1 * wo + ox] += gv * w1;
            }
        }
        for y in 0..h {
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                let gv = rows[y * wo + ox];
                dst[y * w + i0] += gv * T::of(w0);
                dst[y * w + i1] += gv * T::of(w1);
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert!(n == nb && h == hb && w == wb, "concat shape mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: splits after the first `ca` channels.
pub fn split_channels<T: Real>(x: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * (c - ca) * hw);
    for i in 0..n {
        let s = x.sample(i);
        a.extend_from_slice(&s[..ca * hw]);
        b.extend_from_slice(&s[ca * hw..]);
    }
    (Tensor::from_vec([n, ca, h, w], a), Tensor::from_vec([n, c - ca, h, w], b))
}
