//! Small time-conditioned encoder-decoder used as the noise predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UadError};
use crate::nn::{
    concat_channels, join_name, silu, silu_backward, split_channels, upsample_bilinear2x, upsample_bilinear2x_backward,
    Conv2d, ConvCache, Linear, Module, Param, Real, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of resolutions; the deepest runs at `1 / 2^(levels-1)` of the input.
    pub levels: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { base_channels: 16, levels: 3, time_dim: 32 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.levels == 0 || self.levels > 6 {
            return Err(UadError::invalid("denoiser config", format!("{self:?}: need base_channels >= 1 and 1 <= levels <= 6")));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(UadError::invalid("denoiser config", format!("time_dim {} must be even and >= 2", self.time_dim)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// `[sin(t f_0) .. sin(t f_k), cos(t f_0) .. cos(t f_k)]` with geometric frequencies.
pub fn timestep_embedding<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
        data.extend(freqs.iter().map(|f| T::of((step as f64 * f).sin())));
        data.extend(freqs.iter().map(|f| T::of((step as f64 * f).cos())));
    }
    Tensor::from_vec([t.len(), dim, 1, 1], data)
}

#[derive(Debug, Clone)]
struct TimeBlock<T> {
    conv1: Conv2d<T>,
    temb: Linear<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

struct TimeBlockCache<T> {
    x: Tensor<T>,
    c1: ConvCache<T>,
    h1: Tensor<T>,
    c2: ConvCache<T>,
    skip: Option<ConvCache<T>>,
}

impl<T: Real> TimeBlock<T> {
    fn new(cin: usize, cout: usize, tdim: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(cin, cout, 3, 1, 1, true, 1.0, rng),
            temb: Linear::new(tdim, cout, 1.0, rng),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, true, 1.0, rng),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, 0, true, 1.0, rng)),
        }
    }

    fn add_time(h: &mut Tensor<T>, t: &Tensor<T>) {
        let [n, c, hh, ww] = h.shape();
        let hw = hh * ww;
        for b in 0..n {
            for ch in 0..c {
                let bias = t.data()[b * c + ch];
                h.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter_mut().for_each(|v| *v += bias);
            }
        }
    }

    fn forward(&self, x: &Tensor<T>, e: &Tensor<T>) -> Tensor<T> {
        let mut h1 = self.conv1.forward(&silu(x));
        Self::add_time(&mut h1, &self.temb.forward(e));
        let mut out = self.conv2.forward(&silu(&h1));
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(x)),
            None => out.add_assign(x),
        }
        out
    }

    fn forward_cached(&self, x: &Tensor<T>, e: &Tensor<T>) -> (Tensor<T>, TimeBlockCache<T>) {
        let (mut h1, c1) = self.conv1.forward_cached(&silu(x));
        Self::add_time(&mut h1, &self.temb.forward(e));
        let (mut out, c2) = self.conv2.forward_cached(&silu(&h1));
        let skip = match &self.skip {
            Some(s) => {
                let (sk, cache) = s.forward_cached(x);
                out.add_assign(&sk);
                Some(cache)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        (out, TimeBlockCache { x: x.clone(), c1, h1, c2, skip })
    }

    /// Returns `(d input, d time embedding)`.
    fn backward(&mut self, cache: &TimeBlockCache<T>, e: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let db = self.conv2.backward(&cache.c2, g);
        let dh1 = silu_backward(&cache.h1, &db);
        let [n, c, hh, ww] = dh1.shape();
        let hw = hh * ww;
        let dt: Vec<T> = dh1.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
        let de = self.temb.backward(e, &Tensor::from_vec([n, c, 1, 1], dt));
        let da = self.conv1.backward(&cache.c1, &dh1);
        let mut dx = silu_backward(&cache.x, &da);
        match (&mut self.skip, &cache.skip) {
            (Some(s), Some(sc)) => dx.add_assign(&s.backward(sc, g)),
            _ => dx.add_assign(g),
        }
        (dx, de)
    }
}

impl<T: Real> Module<T> for TimeBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join_name(prefix, "conv1"), f);
        self.temb.visit(&join_name(prefix, "temb"), f);
        self.conv2.visit(&join_name(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join_name(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join_name(prefix, "conv1"), f);
        self.temb.visit_mut(&join_name(prefix, "temb"), f);
        self.conv2.visit_mut(&join_name(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join_name(prefix, "skip"), f);
        }
    }
}

/// U-shaped noise predictor `eps(x_t, t)` with skip connections at every level.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    time: Linear<T>,
    stem: Conv2d<T>,
    enc: Vec<TimeBlock<T>>,
    down: Vec<Conv2d<T>>,
    mid: TimeBlock<T>,
    dec: Vec<TimeBlock<T>>,
    head: Conv2d<T>,
}

pub struct DenoiserCache<T> {
    sinus: Tensor<T>,
    e_pre: Tensor<T>,
    e: Tensor<T>,
    stem: ConvCache<T>,
    enc: Vec<TimeBlockCache<T>>,
    down: Vec<ConvCache<T>>,
    mid: TimeBlockCache<T>,
    dec: Vec<TimeBlockCache<T>>,
    skip_channels: Vec<usize>,
    head_in: Tensor<T>,
    head: ConvCache<T>,
}

impl<T: Real> Denoiser<T> {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let l = config.levels;
        let td = config.time_dim;
        let c = |i| config.channels(i);
        Ok(Self {
            config,
            time: Linear::new(td, td, 1.0, rng),
            stem: Conv2d::new(1, c(0), 3, 1, 1, true, 1.0, rng),
            enc: (0..l - 1).map(|i| TimeBlock::new(c(i), c(i), td, rng)).collect(),
            down: (0..l - 1).map(|i| Conv2d::new(c(i), c(i + 1), 3, 2, 1, true, 1.0, rng)).collect(),
            mid: TimeBlock::new(c(l - 1), c(l - 1), td, rng),
            dec: (0..l - 1).map(|i| TimeBlock::new(c(i + 1) + c(i), c(i), td, rng)).collect(),
            head: Conv2d::new(c(0), 1, 3, 1, 1, true, 1.0, rng).zeroed(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn check_input(&self, x: &Tensor<T>, t: &[usize]) -> Result<()> {
        let [n, c, h, w] = x.shape();
        let m = 1 << (self.config.levels - 1);
        if c != 1 || t.len() != n || h % m != 0 || w % m != 0 {
            return Err(UadError::invalid(
                "denoiser input",
                format!("shape {:?} with {} timesteps; need 1 channel, one step per sample, sides divisible by {m}", x.shape(), t.len()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, t: &[usize]) -> Tensor<T> {
        let e = silu(&self.time.forward(&timestep_embedding(t, self.config.time_dim)));
        let mut h = self.stem.forward(x);
        let mut skips = Vec::new();
        for (blk, down) in self.enc.iter().zip(&self.down) {
            h = blk.forward(&h, &e);
            skips.push(h.clone());
            h = down.forward(&h);
        }
        h = self.mid.forward(&h, &e);
        for (blk, skip) in self.dec.iter().zip(&skips).rev() {
            h = blk.forward(&concat_channels(&upsample_bilinear2x(&h), skip), &e);
        }
        self.head.forward(&silu(&h))
    }

    pub fn forward_cached(&self, x: &Tensor<T>, t: &[usize]) -> (Tensor<T>, DenoiserCache<T>) {
        let sinus = timestep_embedding(t, self.config.time_dim);
        let e_pre = self.time.forward(&sinus);
        let e = silu(&e_pre);
        let (mut h, stem) = self.stem.forward_cached(x);
        let (mut enc, mut down, mut skips) = (Vec::new(), Vec::new(), Vec::new());
        for (blk, dn) in self.enc.iter().zip(&self.down) {
            let (o, c) = blk.forward_cached(&h, &e);
            enc.push(c);
            skips.push(o.clone());
            let (o, c) = dn.forward_cached(&o);
            down.push(c);
            h = o;
        }
        let (o, mid) = self.mid.forward_cached(&h, &e);
        h = o;
        let mut dec = Vec::new();
        let mut skip_channels = Vec::new();
        for (blk, skip) in self.dec.iter().zip(&skips).rev() {
            let up = upsample_bilinear2x(&h);
            skip_channels.push(up.c());
            let (o, c) = blk.forward_cached(&concat_channels(&up, skip), &e);
            dec.push(c);
            h = o;
        }
        let head_in = h;
        let (out, head) = self.head.forward_cached(&silu(&head_in));
        (out, DenoiserCache { sinus, e_pre, e, stem, enc, down, mid, dec, skip_channels, head_in, head })
    }

    /// Accumulates parameter gradients for `d loss / d output`.
    pub fn backward(&mut self, cache: &DenoiserCache<T>, g: &Tensor<T>) {
        let dh = self.head.backward(&cache.head, g);
        let mut dh = silu_backward(&cache.head_in, &dh);
        let mut de = Tensor::zeros(cache.e.shape());
        let l = self.dec.len();
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; l];
        // decoder caches were pushed deepest-first, so walk them back shallowest-first
        for (i, (blk, c)) in self.dec.iter_mut().zip(cache.dec.iter().rev()).enumerate() {
            let (dx, d_e) = blk.backward(c, &cache.e, &dh);
            de.add_assign(&d_e);
            let (dup, dskip) = split_channels(&dx, cache.skip_channels[l - 1 - i]);
            dskips[i] = Some(dskip);
            dh = upsample_bilinear2x_backward(&dup);
        }
        let (dx, d_e) = self.mid.backward(&cache.mid, &cache.e, &dh);
        de.add_assign(&d_e);
        dh = dx;
        for i in (0..l).rev() {
            let mut d = self.down[i].backward(&cache.down[i], &dh);
            d.add_assign(dskips[i].as_ref().expect("filled above"));
            let (dx, d_e) = self.enc[i].backward(&cache.enc[i], &cache.e, &d);
            de.add_assign(&d_e);
            dh = dx;
        }
        self.stem.backward(&cache.stem, &dh);
        let de_pre = silu_backward(&cache.e_pre, &de);
        self.time.backward(&cache.sinus, &de_pre);
    }
}

impl<T: Real> Module<T> for Denoiser<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.time.visit(&join_name(prefix, "time"), f);
        self.stem.visit(&join_name(prefix, "stem"), f);
        for (i, b) in self.enc.iter().enumerate() {
            b.visit(&join_name(prefix, &format!("enc{i}")), f);
        }
        for (i, d) in self.down.iter().enumerate() {
            d.visit(&join_name(prefix, &format!("down{i}")), f);
        }
        self.mid.visit(&join_name(prefix, "mid"), f);
        for (i, b) in self.dec.iter().enumerate() {
            b.visit(&join_name(prefix, &format!("dec{i}")), f);
        }
        self.head.visit(&join_name(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.time.visit_mut(&join_name(prefix, "time"), f);
        self.stem.visit_mut(&join_name(prefix, "stem"), f);
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.visit_mut(&join_name(prefix, &format!("enc{i}")), f);
        }
        for (i, d) in self.down.iter_mut().enumerate() {
            d.visit_mut(&join_name(prefix, &format!("down{i}")), f);
        }
        self.mid.visit_mut(&join_name(prefix, "mid"), f);
        for (i, b) in self.dec.iter_mut().enumerate() {
            b.visit_mut(&join_name(prefix, &format!("dec{i}")), f);
        }
        self.head.visit_mut(&join_name(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = DenoiserConfig { base_channels: 2, levels: 3, time_dim: 4 };
        let mut net = Denoiser::<f64>::new(cfg, &mut rng).unwrap();
        // a silent head would make every upstream gradient zero
        net.head.weight.value.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        let x = Tensor::from_vec([2, 1, 8, 8], (0..128).map(|_| StandardNormal.sample(&mut rng)).collect());
        let t = [3, 17];
        let target: Vec<f64> = (0..128).map(|_| StandardNormal.sample(&mut rng)).collect();
        let loss = |net: &Denoiser<f64>| -> f64 {
            net.forward(&x, &t).data().iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 128.0
        };
        let (out, cache) = net.forward_cached(&x, &t);
        assert_eq!(out, net.forward(&x, &t));
        let g = out.zip_map(&Tensor::from_vec(out.shape(), target.clone()), |a, b| 2.0 * (a - b) / 128.0);
        net.backward(&cache, &g);
        let mut names = Vec::new();
        net.visit("", &mut |n, p| names.push((n.to_string(), p.len())));
        for (name, len) in names {
            for idx in [0, len / 2, len - 1] {
                let mut analytic = 0.0;
                let mut probe = net.clone();
                let h = 1e-5;
                let set = |m: &mut Denoiser<f64>, d: f64| {
                    m.visit_mut("", &mut |n, p| {
                        if n == name {
                            p.value[idx] += d;
                        }
                    })
                };
                net.visit("", &mut |n, p| {
                    if n == name {
                        analytic = p.grad[idx];
                    }
                });
                set(&mut probe, h);
                let up = loss(&probe);
                set(&mut probe, -2.0 * h);
                let down = loss(&probe);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - analytic).abs() <= 1e-7 + 1e-3 * fd.abs().max(analytic.abs()), "{name}[{idx}]: fd {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn zero_head_predicts_zero_and_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Denoiser::<f32>::new(DenoiserConfig::default(), &mut rng).unwrap();
        let x = Tensor::full([1, 1, 16, 16], 0.3f32);
        assert!(net.forward(&x, &[5]).data().iter().all(|&v| v == 0.0));
        assert!(net.check_input(&Tensor::<f32>::zeros([1, 1, 10, 16]), &[0]).is_err());
        assert!(net.check_input(&x, &[0, 1]).is_err());
        assert!(DenoiserConfig { time_dim: 3, ..Default::default() }.validate().is_err());
    }
}
