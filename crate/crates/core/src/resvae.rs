//! Residual variational autoencoder for 2D slices.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UadError};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join_name, leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward,
    upsample_bilinear2x, upsample_bilinear2x_backward, Archive, BatchNorm2d, BatchNormCache, Conv2d, ConvCache, Linear,
    Module, Param, Real, Tensor,
};
use crate::volume::{slice_from_tensor, slices_to_tensor, Slice2D};

/// Log-variance is clamped to this range before exponentiation.
pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResVaeConfig {
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub negative_slope: f64,
    pub upsample_mode: UpsampleMode,
    pub upsample_scale: usize,
    /// Side of the square input slices.
    pub input_size: usize,
}

impl Default for ResVaeConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256],
            latent_dim: 256,
            negative_slope: 0.01,
            upsample_mode: UpsampleMode::Bilinear,
            upsample_scale: 2,
            input_size: 96,
        }
    }
}

impl ResVaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(UadError::invalid("resvae config", reason));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channels {:?} must be nonempty and positive", self.channels));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("channels {:?} must be strictly increasing", self.channels));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if !(self.negative_slope.is_finite() && self.negative_slope >= 0.0) {
            return bad(format!("negative_slope {} must be >= 0", self.negative_slope));
        }
        if self.upsample_scale != 2 {
            return bad(format!("upsample_scale {} unsupported (only 2)", self.upsample_scale));
        }
        let factor = 1usize << self.channels.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return bad(format!("input_size {} must be a positive multiple of {factor}", self.input_size));
        }
        Ok(())
    }

    /// Spatial side of the deepest feature map.
    pub fn base_size(&self) -> usize {
        self.input_size >> self.channels.len()
    }
}

/// Posterior parameters for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LatentDistribution {
    pub fn from_logvar(mu: Vec<f64>, logvar: &[f64]) -> Self {
        let sigma = logvar.iter().map(|lv| (0.5 * lv.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1)).exp()).collect();
        Self { mu, sigma }
    }

    pub fn logvar(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| 2.0 * s.ln()).collect()
    }
}

/// `z = mu + sigma * eps`.
pub fn reparameterize(d: &LatentDistribution, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != d.mu.len() {
        return Err(UadError::shape("reparameterisation noise", &[d.mu.len()], &[eps.len()]));
    }
    Ok(d.mu.iter().zip(&d.sigma).zip(eps).map(|((m, s), e)| m + s * e).collect())
}

/// conv3x3(stride) -> BN -> leaky -> conv3x3 -> BN, plus shortcut, then leaky.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    proj: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    slope: T,
}

pub(crate) struct ResBlockCache<T> {
    c1: ConvCache<T>,
    b1: BatchNormCache<T>,
    n1: Tensor<T>,
    c2: ConvCache<T>,
    b2: BatchNormCache<T>,
    proj: Option<(ConvCache<T>, BatchNormCache<T>)>,
    sum: Tensor<T>,
}

impl<T: Real> ResBlock<T> {
    pub(crate) fn new(cin: usize, cout: usize, stride: usize, slope: f64, rng: &mut impl Rng) -> Self {
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, false, gain, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, false, gain, rng),
            bn2: BatchNorm2d::new(cout),
            proj: (cin != cout || stride != 1).then(|| (Conv2d::new(cin, cout, 1, stride, 0, false, 1.0, rng), BatchNorm2d::new(cout))),
            slope: T::of(slope),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = leaky_relu(&self.bn1.forward(&self.conv1.forward(x)), self.slope);
        let mut s = self.bn2.forward(&self.conv2.forward(&h));
        match &self.proj {
            Some((c, b)) => s.add_assign(&b.forward(&c.forward(x))),
            None => s.add_assign(x),
        }
        leaky_relu(&s, self.slope)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, ResBlockCache<T>) {
        let (h, c1) = self.conv1.forward_cached(x);
        let (n1, b1) = self.bn1.forward_train(&h);
        let (h, c2) = self.conv2.forward_cached(&leaky_relu(&n1, self.slope));
        let (mut sum, b2) = self.bn2.forward_train(&h);
        let proj = match &mut self.proj {
            Some((c, b)) => {
                let (p, pc) = c.forward_cached(x);
                let (p, pb) = b.forward_train(&p);
                sum.add_assign(&p);
                Some((pc, pb))
            }
            None => {
                sum.add_assign(x);
                None
            }
        };
        (leaky_relu(&sum, self.slope), ResBlockCache { c1, b1, n1, c2, b2, proj, sum })
    }

    pub(crate) fn backward(&mut self, cache: &ResBlockCache<T>, g: &Tensor<T>) -> Tensor<T> {
        let ds = leaky_relu_backward(&cache.sum, g, self.slope);
        let d = self.bn2.backward(&cache.b2, &ds);
        let d = self.conv2.backward(&cache.c2, &d);
        let d = leaky_relu_backward(&cache.n1, &d, self.slope);
        let d = self.bn1.backward(&cache.b1, &d);
        let mut dx = self.conv1.backward(&cache.c1, &d);
        match (&mut self.proj, &cache.proj) {
            (Some((c, b)), Some((pc, pb))) => {
                let dp = b.backward(pb, &ds);
                dx.add_assign(&c.backward(pc, &dp));
            }
            _ => dx.add_assign(&ds),
        }
        dx
    }
}

impl<T: Real> Module<T> for ResBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join_name(prefix, "conv1"), f);
        self.bn1.visit(&join_name(prefix, "bn1"), f);
        self.conv2.visit(&join_name(prefix, "conv2"), f);
        self.bn2.visit(&join_name(prefix, "bn2"), f);
        if let Some((c, b)) = &self.proj {
            c.visit(&join_name(prefix, "proj"), f);
            b.visit(&join_name(prefix, "proj_bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join_name(prefix, "conv1"), f);
        self.bn1.visit_mut(&join_name(prefix, "bn1"), f);
        self.conv2.visit_mut(&join_name(prefix, "conv2"), f);
        self.bn2.visit_mut(&join_name(prefix, "bn2"), f);
        if let Some((c, b)) = &mut self.proj {
            c.visit_mut(&join_name(prefix, "proj"), f);
            b.visit_mut(&join_name(prefix, "proj_bn"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResVae<T> {
    config: ResVaeConfig,
    enc: Vec<ResBlock<T>>,
    mu_head: Linear<T>,
    logvar_head: Linear<T>,
    dec_in: Linear<T>,
    dec: Vec<ResBlock<T>>,
    out: Conv2d<T>,
    slope: T,
}

/// Encoder outputs for a batch, `[n, latent, 1, 1]` each.
#[derive(Debug, Clone)]
pub struct Posterior<T> {
    pub mu: Tensor<T>,
    /// Clamped log-variance.
    pub logvar: Tensor<T>,
}

pub struct ResVaeCache<T> {
    enc: Vec<ResBlockCache<T>>,
    enc_out_shape: [usize; 4],
    pooled: Tensor<T>,
    raw_logvar: Tensor<T>,
    z: Tensor<T>,
    eps: Tensor<T>,
    logvar: Tensor<T>,
    dec_pre: Tensor<T>,
    dec: Vec<ResBlockCache<T>>,
    out: ConvCache<T>,
    recon: Tensor<T>,
}

impl<T: Real> ResVae<T> {
    pub fn new(config: ResVaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let slope = config.negative_slope;
        let last = *ch.last().expect("validated");
        let base = config.base_size();
        let enc = (0..ch.len()).map(|i| ResBlock::new(if i == 0 { 1 } else { ch[i - 1] }, ch[i], 2, slope, rng)).collect();
        // decoder channels mirror the encoder: c_last -> ... -> c_0 -> c_0
        let mut dec_ch: Vec<usize> = ch.iter().rev().copied().collect();
        dec_ch.push(ch[0]);
        let dec = dec_ch.windows(2).map(|w| ResBlock::new(w[0], w[1], 1, slope, rng)).collect();
        Ok(Self {
            mu_head: Linear::new(last, config.latent_dim, 1.0, rng),
            logvar_head: Linear::new(last, config.latent_dim, 0.1, rng),
            dec_in: Linear::new(config.latent_dim, last * base * base, 1.0, rng),
            out: Conv2d::new(ch[0], 1, 3, 1, 1, true, 1.0, rng),
            enc,
            dec,
            slope: T::of(slope),
            config,
        })
    }

    pub fn config(&self) -> &ResVaeConfig {
        &self.config
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        if x.c() != 1 || x.h() != s || x.w() != s || x.n() == 0 {
            return Err(UadError::shape("resvae input", &[1, s, s], &[x.c(), x.h(), x.w()]));
        }
        Ok(())
    }

    fn clamp_logvar(raw: &Tensor<T>) -> Tensor<T> {
        raw.map(|v| v.max(T::of(LOGVAR_RANGE.0)).min(T::of(LOGVAR_RANGE.1)))
    }

    /// Evaluation-mode encoder.
    pub fn encode(&self, x: &Tensor<T>) -> Posterior<T> {
        let mut h = x.clone();
        for b in &self.enc {
            h = b.forward(&h);
        }
        let pooled = global_avg_pool(&h);
        Posterior { mu: self.mu_head.forward(&pooled), logvar: Self::clamp_logvar(&self.logvar_head.forward(&pooled)) }
    }

    fn decoder_seed(&self, z: &Tensor<T>) -> Tensor<T> {
        let c = *self.config.channels.last().expect("validated");
        let b = self.config.base_size();
        self.dec_in.forward(z).reshape([z.n(), c, b, b])
    }

    pub fn decode(&self, z: &Tensor<T>) -> Tensor<T> {
        let mut h = leaky_relu(&self.decoder_seed(z), self.slope);
        for b in &self.dec {
            h = b.forward(&upsample_bilinear2x(&h));
        }
        sigmoid(&self.out.forward(&h))
    }

    /// Evaluation mode: decode from the posterior mean.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Tensor<T> {
        self.decode(&self.encode(x).mu)
    }

    /// Training mode with explicit noise `eps` (`[n, latent, 1, 1]`).
    pub fn forward_train(&mut self, x: &Tensor<T>, eps: &Tensor<T>) -> (Tensor<T>, Posterior<T>, ResVaeCache<T>) {
        let mut h = x.clone();
        let mut enc = Vec::with_capacity(self.enc.len());
        for b in &mut self.enc {
            let (o, c) = b.forward_train(&h);
            enc.push(c);
            h = o;
        }
        let enc_out_shape = h.shape();
        let pooled = global_avg_pool(&h);
        let mu = self.mu_head.forward(&pooled);
        let raw_logvar = self.logvar_head.forward(&pooled);
        let logvar = Self::clamp_logvar(&raw_logvar);
        let z = Tensor::from_vec(
            mu.shape(),
            mu.data().iter().zip(logvar.data()).zip(eps.data()).map(|((&m, &lv), &e)| m + (T::of(0.5) * lv).exp() * e).collect(),
        );
        let dec_pre = self.decoder_seed(&z);
        let mut h = leaky_relu(&dec_pre, self.slope);
        let mut dec = Vec::with_capacity(self.dec.len());
        for b in &mut self.dec {
            let (o, c) = b.forward_train(&upsample_bilinear2x(&h));
            dec.push(c);
            h = o;
        }
        let (logits, out) = self.out.forward_cached(&h);
        let recon = sigmoid(&logits);
        let post = Posterior { mu: mu.clone(), logvar: logvar.clone() };
        let cache = ResVaeCache { enc, enc_out_shape, pooled, raw_logvar, z, eps: eps.clone(), logvar, dec_pre, dec, out, recon: recon.clone() };
        (recon, post, cache)
    }

    /// Accumulates parameter gradients given loss gradients for the reconstruction
    /// and for the (clamped) posterior parameters.
    pub fn backward(&mut self, cache: &ResVaeCache<T>, d_recon: &Tensor<T>, d_mu: &Tensor<T>, d_logvar: &Tensor<T>) {
        let d = sigmoid_backward(&cache.recon, d_recon);
        let mut d = self.out.backward(&cache.out, &d);
        for (b, c) in self.dec.iter_mut().zip(&cache.dec).rev() {
            d = upsample_bilinear2x_backward(&b.backward(c, &d));
        }
        let d = leaky_relu_backward(&cache.dec_pre, &d, self.slope);
        let dz = self.dec_in.backward(&cache.z, &d.reshape([cache.z.n(), cache.dec_pre.len() / cache.z.n(), 1, 1]));
        let half = T::of(0.5);
        let (lo, hi) = (T::of(LOGVAR_RANGE.0), T::of(LOGVAR_RANGE.1));
        let mut dmu = d_mu.clone();
        dmu.add_assign(&dz);
        let dlv = Tensor::from_vec(
            d_logvar.shape(),
            (0..dz.len())
                .map(|i| {
                    let raw = cache.raw_logvar.data()[i];
                    if raw < lo || raw > hi {
                        return T::zero();
                    }
                    let lv = cache.logvar.data()[i];
                    d_logvar.data()[i] + dz.data()[i] * cache.eps.data()[i] * half * (half * lv).exp()
                })
                .collect(),
        );
        let mut dp = self.mu_head.backward(&cache.pooled, &dmu);
        dp.add_assign(&self.logvar_head.backward(&cache.pooled, &dlv));
        let mut d = global_avg_pool_backward(&dp, cache.enc_out_shape);
        for (b, c) in self.enc.iter_mut().zip(&cache.enc).rev() {
            d = b.backward(c, &d);
        }
    }
}

impl<T: Real> Module<T> for ResVae<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.enc.iter().enumerate() {
            b.visit(&join_name(prefix, &format!("enc{i}")), f);
        }
        self.mu_head.visit(&join_name(prefix, "mu"), f);
        self.logvar_head.visit(&join_name(prefix, "logvar"), f);
        self.dec_in.visit(&join_name(prefix, "dec_in"), f);
        for (i, b) in self.dec.iter().enumerate() {
            b.visit(&join_name(prefix, &format!("dec{i}")), f);
        }
        self.out.visit(&join_name(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.visit_mut(&join_name(prefix, &format!("enc{i}")), f);
        }
        self.mu_head.visit_mut(&join_name(prefix, "mu"), f);
        self.logvar_head.visit_mut(&join_name(prefix, "logvar"), f);
        self.dec_in.visit_mut(&join_name(prefix, "dec_in"), f);
        for (i, b) in self.dec.iter_mut().enumerate() {
            b.visit_mut(&join_name(prefix, &format!("dec{i}")), f);
        }
        self.out.visit_mut(&join_name(prefix, "out"), f);
    }
}

fn non_finite_check<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(UadError::non_finite("resvae", format!("{what} contains non-finite values")))
    }
}

impl ResVae<f32> {
    pub fn encode_slice(&self, s: &Slice2D) -> Result<LatentDistribution> {
        let x = slices_to_tensor([s])?;
        self.check_input(&x)?;
        let p = self.encode(&x);
        non_finite_check(&p.mu, "mu")?;
        non_finite_check(&p.logvar, "log-variance")?;
        let lv: Vec<f64> = p.logvar.data().iter().map(|&v| v as f64).collect();
        Ok(LatentDistribution::from_logvar(p.mu.data().iter().map(|&v| v as f64).collect(), &lv))
    }

    pub fn decode_latent(&self, z: &[f64]) -> Result<Slice2D> {
        if z.len() != self.config.latent_dim {
            return Err(UadError::shape("latent vector", &[self.config.latent_dim], &[z.len()]));
        }
        let t = Tensor::from_vec([1, z.len(), 1, 1], z.iter().map(|&v| v as f32).collect());
        let out = self.decode(&t);
        non_finite_check(&out, "reconstruction")?;
        slice_from_tensor(&out, 0, Default::default())
    }

    /// Evaluation-mode reconstruction of a batch of slices (eps = 0).
    pub fn reconstruct_slices(&self, slices: &[Slice2D]) -> Result<Vec<Slice2D>> {
        let x = slices_to_tensor(slices)?;
        self.check_input(&x)?;
        let out = self.reconstruct(&x);
        non_finite_check(&out, "reconstruction")?;
        slices.iter().enumerate().map(|(i, s)| slice_from_tensor(&out, i, s.source().clone())).collect()
    }

    /// Encode, add `sigma * eps`, decode.
    pub fn forward_slice(&self, s: &Slice2D, eps: &[f64]) -> Result<(Slice2D, LatentDistribution)> {
        let d = self.encode_slice(s)?;
        let z = reparameterize(&d, eps)?;
        Ok((self.decode_latent(&z)?.with_source(s.source().clone()), d))
    }
}

const CHECKPOINT_KIND: &str = "resvae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ResVaeConfig,
    pub epoch: usize,
    pub val_loss: f64,
    pub config_hash: String,
}

pub fn save_checkpoint(model: &ResVae<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    Archive::from_module(model, CHECKPOINT_KIND, serde_json::to_value(meta).expect("serialisable")).save(path)
}

/// Loads a checkpoint; when `expected` is given the stored config must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ResVaeConfig>) -> Result<(ResVae<f32>, CheckpointMeta)> {
    let archive = Archive::load(path)?;
    let fail = |reason: String| UadError::Checkpoint { path: path.into(), reason };
    if archive.header.kind != CHECKPOINT_KIND {
        return Err(fail(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", archive.header.kind)));
    }
    let meta: CheckpointMeta = serde_json::from_value(archive.header.meta.clone()).map_err(|e| fail(format!("metadata: {e}")))?;
    if let Some(cfg) = expected {
        if *cfg != meta.config {
            return Err(fail(format!("config mismatch: checkpoint has {:?}, run expects {cfg:?}", meta.config)));
        }
    }
    let mut model = ResVae::new(meta.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    archive.restore(&mut model, path)?;
    Ok((model, meta))
}
