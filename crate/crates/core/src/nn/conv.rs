use rand::Rng;

use super::real::gemm;
use super::{join_name, Module, Param, Real, Tensor};

/// Square-kernel 2D convolution with zero padding, lowered to GEMM via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

/// Input retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input: Tensor<T>,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = Param::kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, gain, rng);
        let bias = bias.then(|| Param::zeros(&[out_ch]));
        Self { weight, bias, in_ch, out_ch, kernel, stride, padding }
    }

    /// Weights and bias set to zero (used for output heads that must start silent).
    pub fn zeroed(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = &mut self.bias {
            b.value.iter_mut().for_each(|v| *v = T::zero());
        }
        self
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        let s = self.stride;
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, col: &mut [T]) {
        let k = self.kernel;
        let s = self.stride;
        let p = self.padding as isize;
        let hw_out = ho * wo;
        for ci in 0..self.in_ch {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..ho {
                        let iy = (oy * s) as isize - p + ky as isize;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize - p + kx as isize;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let k = self.kernel;
        let s = self.stride;
        let p = self.padding as isize;
        let hw_out = ho * wo;
        for ci in 0..self.in_ch {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..ho {
                        let iy = (oy * s) as isize - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s) as isize - p + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_ch, "conv expects {} input channels, got {c}", self.in_ch);
        let (ho, wo) = self.output_hw(h, w);
        let hw_out = ho * wo;
        let mut out = Tensor::zeros([n, self.out_ch, ho, wo]);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); self.col_rows() * hw_out] };
        for i in 0..n {
            let xs = x.sample(i);
            let cols: &[T] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, h, w, ho, wo, &mut col);
                &col
            };
            let dst = out.sample_mut(i);
            gemm::nn(self.out_ch, self.col_rows(), hw_out, &self.weight.value, cols, T::zero(), dst);
            if let Some(b) = &self.bias {
                for (co, &bv) in b.value.iter().enumerate() {
                    dst[co * hw_out..(co + 1) * hw_out].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        (self.forward(x), ConvCache { input: x.clone() })
    }

    fn backward_impl(&self, cache: &ConvCache<T>, g: &Tensor<T>, mut wgrad: Option<(&mut [T], Option<&mut [T]>)>) -> Tensor<T> {
        let x = &cache.input;
        let [n, _, h, w] = x.shape();
        let (ho, wo) = self.output_hw(h, w);
        assert_eq!(g.shape(), [n, self.out_ch, ho, wo], "conv backward gradient shape");
        let hw_out = ho * wo;
        let rows = self.col_rows();
        let mut dx = Tensor::zeros(x.shape());
        let mut col = vec![T::zero(); rows * hw_out];
        let mut dcol = vec![T::zero(); rows * hw_out];
        for i in 0..n {
            let gs = g.sample(i);
            if let Some((dw, db)) = wgrad.as_mut() {
                let cols: &[T] = if self.is_pointwise() {
                    x.sample(i)
                } else {
                    self.im2col(x.sample(i), h, w, ho, wo, &mut col);
                    &col
                };
                gemm::nt(self.out_ch, hw_out, rows, gs, cols, T::one(), dw);
                if let Some(db) = db.as_mut() {
                    for co in 0..self.out_ch {
                        db[co] += gs[co * hw_out..(co + 1) * hw_out].iter().copied().sum::<T>();
                    }
                }
            }
            if self.is_pointwise() {
                gemm::tn(rows, self.out_ch, hw_out, &self.weight.value, gs, T::zero(), dx.sample_mut(i));
            } else {
                gemm::tn(rows, self.out_ch, hw_out, &self.weight.value, gs, T::zero(), &mut dcol);
                self.col2im(&dcol, h, w, ho, wo, dx.sample_mut(i));
            }
        }
        dx
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<T>, g: &Tensor<T>) -> Tensor<T> {
        let mut dw = std::mem::take(&mut self.weight.grad);
        let mut db = self.bias.as_mut().map(|b| std::mem::take(&mut b.grad));
        let dx = self.backward_impl(cache, g, Some((&mut dw, db.as_deref_mut())));
        self.weight.grad = dw;
        if let (Some(b), Some(db)) = (self.bias.as_mut(), db) {
            b.grad = db;
        }
        dx
    }

    /// Input gradient only; parameters are treated as constants.
    pub fn backward_input(&self, cache: &ConvCache<T>, g: &Tensor<T>) -> Tensor<T> {
        self.backward_impl(cache, g, None)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join_name(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join_name(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join_name(prefix, "bias"), b);
        }
    }
}
