//! Composite reconstruction objective, KL annealing and the optimisation loop.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::make_batches;
use crate::error::{Result, UadError};
use crate::nn::{
    clip_grad_norm, concat_channels, join_name, leaky_relu, leaky_relu_backward, zero_grad, AdamW, AdamWConfig, Archive,
    Conv2d, Module, Param, Real, Tensor,
};
use crate::resvae::{LatentDistribution, Posterior, ResVae};
use crate::ssim::{ssim_grad, SsimConfig};
use crate::volume::{slices_to_tensor, Slice2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_ssim: f64,
    pub w_perc: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub anneal_epochs: usize,
    pub perc_stage_weights: [f64; 2],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_ssim: 0.5, w_perc: 0.3, beta_start: 1e-5, beta_end: 1e-4, anneal_epochs: 100, perc_stage_weights: [0.3, 0.15] }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_ssim, self.w_perc, self.beta_start, self.beta_end, self.perc_stage_weights[0], self.perc_stage_weights[1]];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(UadError::invalid("loss weights", format!("{self:?}: all weights must be finite and >= 0")));
        }
        if self.beta_start > self.beta_end {
            return Err(UadError::invalid("loss weights", format!("beta_start {} > beta_end {}", self.beta_start, self.beta_end)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, learning_rate: 1e-4, weight_decay: 0.01, patience: 15, grad_clip_norm: 1.0, batch_size: 32 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("epochs", self.epochs > 0, self.epochs as f64),
            ("learning_rate", self.learning_rate.is_finite() && self.learning_rate > 0.0, self.learning_rate),
            ("weight_decay", self.weight_decay.is_finite() && self.weight_decay >= 0.0, self.weight_decay),
            ("patience", self.patience > 0, self.patience as f64),
            ("grad_clip_norm", self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0, self.grad_clip_norm),
            ("batch_size", self.batch_size > 0, self.batch_size as f64),
        ];
        match checks.iter().find(|c| !c.1) {
            Some((key, _, v)) => Err(UadError::Config { key: format!("train.{key}"), reason: format!("{v} is out of range") }),
            None => Ok(()),
        }
    }
}

/// Linear ramp from `beta_start` at epoch 0 to `beta_end` at `anneal_epochs`, then flat.
pub fn beta_schedule(epoch: usize, w: &LossWeights) -> f64 {
    if epoch >= w.anneal_epochs {
        return w.beta_end;
    }
    let f = epoch as f64 / w.anneal_epochs as f64;
    w.beta_start * (1.0 - f) + w.beta_end * f
}

/// Mean squared error over every element and its gradient with respect to `y`.
pub fn mse_loss<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> (f64, Tensor<T>) {
    let n = x.len() as f64;
    let v = x.data().iter().zip(y.data()).map(|(&a, &b)| (b - a).f64().powi(2)).sum::<f64>() / n;
    (v, y.zip_map(x, |b, a| T::of(2.0 / n) * (b - a)))
}

pub fn ssim_loss(x: &Slice2D, y: &Slice2D, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - crate::ssim::ssim(x, y, cfg)?)
}

/// Batch mean of `1 - ssim(x_i, y_i)` and its gradient with respect to `y`.
pub fn ssim_loss_batch<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<(f64, Tensor<T>)> {
    let [n, c, h, w] = x.shape();
    if y.shape() != x.shape() {
        return Err(UadError::shape("ssim loss", &x.shape(), &y.shape()));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for i in 0..n * c {
        let xs: Vec<f64> = x.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.f64()).collect();
        let ys: Vec<f64> = y.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.f64()).collect();
        let (s, g) = ssim_grad(&xs, &ys, h, w, cfg)?;
        total += 1.0 - s;
        grad.extend(g.iter().map(|v| T::of(-v / (n * c) as f64)));
    }
    Ok((total / (n * c) as f64, Tensor::from_vec(y.shape(), grad)))
}

/// `0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)`.
pub fn kl_divergence(d: &LatentDistribution) -> f64 {
    0.5 * d.mu.iter().zip(&d.sigma).map(|(m, s)| m * m + s * s - 1.0 - 2.0 * s.ln()).sum::<f64>()
}

/// KL summed over latent dimensions and averaged over the batch, with gradients for
/// `(mu, logvar)`.
pub fn kl_batch<T: Real>(p: &Posterior<T>) -> (f64, Tensor<T>, Tensor<T>) {
    let n = p.mu.n() as f64;
    let v = p.mu.data().iter().zip(p.logvar.data()).map(|(&m, &lv)| {
        let (m, lv) = (m.f64(), lv.f64());
        m * m + lv.exp() - 1.0 - lv
    });
    let value = 0.5 * v.sum::<f64>() / n;
    let dmu = p.mu.map(|m| m / T::of(n));
    let dlv = p.logvar.map(|lv| T::of(0.5 / n) * (lv.exp() - T::one()));
    (value, dmu, dlv)
}

/// Multi-stage feature maps of a single-channel batch.
pub trait FeatureExtractor<T: Real> {
    fn forward(&self, x: &Tensor<T>) -> Vec<Tensor<T>>;
    /// Gradient of `sum_i <grads_i, features_i(x)>` with respect to `x`.
    fn backward_input(&self, x: &Tensor<T>, grads: &[Tensor<T>]) -> Tensor<T>;
}

/// Both stages are the input itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn forward(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![x.clone(), x.clone()]
    }

    fn backward_input(&self, _x: &Tensor<T>, grads: &[Tensor<T>]) -> Tensor<T> {
        grads[0].add(&grads[1])
    }
}

/// Residual conv features: strided stem, then two residual stages (the second strided).
/// Grayscale input is replicated to three channels. Weights are frozen.
#[derive(Debug, Clone)]
pub struct ConvExtractor<T> {
    width: usize,
    stem: Conv2d<T>,
    s1a: Conv2d<T>,
    s1b: Conv2d<T>,
    s2a: Conv2d<T>,
    s2b: Conv2d<T>,
    s2proj: Conv2d<T>,
}

const EXTRACTOR_KIND: &str = "feature-extractor";
const SLOPE: f64 = 0.01;

impl<T: Real> ConvExtractor<T> {
    pub fn random(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = (2.0f64).sqrt();
        Self {
            width,
            stem: Conv2d::new(3, width, 3, 2, 1, true, g, &mut rng),
            s1a: Conv2d::new(width, width, 3, 1, 1, true, g, &mut rng),
            s1b: Conv2d::new(width, width, 3, 1, 1, true, g, &mut rng),
            s2a: Conv2d::new(width, 2 * width, 3, 2, 1, true, g, &mut rng),
            s2b: Conv2d::new(2 * width, 2 * width, 3, 1, 1, true, g, &mut rng),
            s2proj: Conv2d::new(width, 2 * width, 1, 2, 0, false, 1.0, &mut rng),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Archive::from_module(self, EXTRACTOR_KIND, serde_json::json!({ "width": self.width })).save(path)
    }

    /// Loads weights written by [`ConvExtractor::save`] (or any archive with the same layout).
    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        let width = archive.header.meta.get("width").and_then(|v| v.as_u64());
        let width = match (archive.header.kind.as_str(), width) {
            (EXTRACTOR_KIND, Some(w)) if w > 0 => w as usize,
            _ => return Err(UadError::Checkpoint { path: path.into(), reason: "not a feature-extractor archive".into() }),
        };
        let mut model = Self::random(width, 0);
        archive.restore(&mut model, path)?;
        Ok(model)
    }

    fn replicate(x: &Tensor<T>) -> Tensor<T> {
        concat_channels(&concat_channels(x, x), x)
    }

    fn slope() -> T {
        T::of(SLOPE)
    }
}

impl<T: Real> FeatureExtractor<T> for ConvExtractor<T> {
    fn forward(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let s = Self::slope();
        let h0 = leaky_relu(&self.stem.forward(&Self::replicate(x)), s);
        let mut r1 = self.s1b.forward(&leaky_relu(&self.s1a.forward(&h0), s));
        r1.add_assign(&h0);
        let f1 = leaky_relu(&r1, s);
        let mut r2 = self.s2b.forward(&leaky_relu(&self.s2a.forward(&f1), s));
        r2.add_assign(&self.s2proj.forward(&f1));
        vec![f1, leaky_relu(&r2, s)]
    }

    fn backward_input(&self, x: &Tensor<T>, grads: &[Tensor<T>]) -> Tensor<T> {
        let s = Self::slope();
        let x3 = Self::replicate(x);
        let (p0, c0) = self.stem.forward_cached(&x3);
        let h0 = leaky_relu(&p0, s);
        let (a1, ca1) = self.s1a.forward_cached(&h0);
        let (mut r1, cb1) = self.s1b.forward_cached(&leaky_relu(&a1, s));
        r1.add_assign(&h0);
        let f1 = leaky_relu(&r1, s);
        let (a2, ca2) = self.s2a.forward_cached(&f1);
        let (mut r2, cb2) = self.s2b.forward_cached(&leaky_relu(&a2, s));
        let (p2, cp2) = self.s2proj.forward_cached(&f1);
        r2.add_assign(&p2);

        let dr2 = leaky_relu_backward(&r2, &grads[1], s);
        let mut df1 = self.s2proj.backward_input(&cp2, &dr2);
        let d = self.s2b.backward_input(&cb2, &dr2);
        df1.add_assign(&self.s2a.backward_input(&ca2, &leaky_relu_backward(&a2, &d, s)));
        df1.add_assign(&grads[0]);
        let dr1 = leaky_relu_backward(&r1, &df1, s);
        let d = self.s1b.backward_input(&cb1, &dr1);
        let mut dh0 = self.s1a.backward_input(&ca1, &leaky_relu_backward(&a1, &d, s));
        dh0.add_assign(&dr1);
        let dx3 = self.stem.backward_input(&c0, &leaky_relu_backward(&p0, &dh0, s));
        let (a, rest) = crate::nn::split_channels(&dx3, 1);
        let (b, c) = crate::nn::split_channels(&rest, 1);
        a.add(&b).add(&c)
    }
}

impl<T: Real> Module<T> for ConvExtractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join_name(prefix, "stem"), f);
        self.s1a.visit(&join_name(prefix, "stage1.a"), f);
        self.s1b.visit(&join_name(prefix, "stage1.b"), f);
        self.s2a.visit(&join_name(prefix, "stage2.a"), f);
        self.s2b.visit(&join_name(prefix, "stage2.b"), f);
        self.s2proj.visit(&join_name(prefix, "stage2.proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join_name(prefix, "stem"), f);
        self.s1a.visit_mut(&join_name(prefix, "stage1.a"), f);
        self.s1b.visit_mut(&join_name(prefix, "stage1.b"), f);
        self.s2a.visit_mut(&join_name(prefix, "stage2.a"), f);
        self.s2b.visit_mut(&join_name(prefix, "stage2.b"), f);
        self.s2proj.visit_mut(&join_name(prefix, "stage2.proj"), f);
    }
}

/// `sum_i w_i * mse(f_i(x), f_i(y))` and its gradient with respect to `y`.
pub fn perceptual_loss<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
    stage_weights: [f64; 2],
) -> (f64, Tensor<T>) {
    let fx = extractor.forward(x);
    let fy = extractor.forward(y);
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(2);
    for (i, (a, b)) in fx.iter().zip(&fy).enumerate() {
        let (v, g) = mse_loss(a, b);
        value += stage_weights[i] * v;
        grads.push(g.scale(T::of(stage_weights[i])));
    }
    (value, extractor.backward_input(y, &grads))
}

/// Per-term values with the coefficient each was multiplied by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub ssim: f64,
    pub kl: f64,
    pub perceptual: f64,
    pub w_mse: f64,
    pub w_ssim: f64,
    pub beta: f64,
    pub w_perc: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn scaled_add(&mut self, other: &Self, s: f64) {
        self.mse += s * other.mse;
        self.ssim += s * other.ssim;
        self.kl += s * other.kl;
        self.perceptual += s * other.perceptual;
        self.total += s * other.total;
        self.w_mse = other.w_mse;
        self.w_ssim = other.w_ssim;
        self.beta = other.beta;
        self.w_perc = other.w_perc;
    }
}

pub struct LossGradients<T> {
    pub recon: Tensor<T>,
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

pub struct LossContext<'a, T: Real> {
    pub weights: &'a LossWeights,
    pub ssim: &'a SsimConfig,
    pub extractor: &'a dyn FeatureExtractor<T>,
}

/// `MSE + w_ssim * ssim_loss + beta(epoch) * KL + w_perc * perceptual`.
pub fn total_loss<T: Real>(
    x: &Tensor<T>,
    recon: &Tensor<T>,
    post: &Posterior<T>,
    epoch: usize,
    ctx: &LossContext<T>,
) -> Result<(LossBreakdown, LossGradients<T>)> {
    let w = ctx.weights;
    let beta = beta_schedule(epoch, w);
    let (mse, g_mse) = mse_loss(x, recon);
    let (ssim, g_ssim) = ssim_loss_batch(x, recon, ctx.ssim)?;
    let (kl, g_mu, g_lv) = kl_batch(post);
    let (perc, g_perc) = if w.w_perc > 0.0 {
        perceptual_loss(x, recon, ctx.extractor, w.perc_stage_weights)
    } else {
        (0.0, Tensor::zeros(recon.shape()))
    };
    let total = mse + w.w_ssim * ssim + beta * kl + w.w_perc * perc;
    if !total.is_finite() {
        return Err(UadError::non_finite("loss", format!("mse {mse}, ssim {ssim}, kl {kl}, perceptual {perc}")));
    }
    let mut recon_grad = g_mse;
    recon_grad.add_assign(&g_ssim.scale(T::of(w.w_ssim)));
    recon_grad.add_assign(&g_perc.scale(T::of(w.w_perc)));
    let b = T::of(beta);
    Ok((
        LossBreakdown { mse, ssim, kl, perceptual: perc, w_mse: 1.0, w_ssim: w.w_ssim, beta, w_perc: w.w_perc, total },
        LossGradients { recon: recon_grad, mu: g_mu.scale(b), logvar: g_lv.scale(b) },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub best_val: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ResVae<f32>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Last epoch that ran.
    pub stop_epoch: usize,
    pub early_stopped: bool,
    pub history: Vec<EpochRecord>,
}

/// Evaluation-mode mean loss over a slice set.
pub fn evaluate_loss(model: &ResVae<f32>, slices: &[Slice2D], epoch: usize, batch: usize, ctx: &LossContext<f32>) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for chunk in slices.chunks(batch.max(1)) {
        let x = slices_to_tensor(chunk)?;
        let post = model.encode(&x);
        let recon = model.decode(&post.mu);
        let (b, _) = total_loss(&x, &recon, &post, epoch, ctx)?;
        acc.scaled_add(&b, chunk.len() as f64 / slices.len() as f64);
    }
    Ok(acc)
}

/// AdamW with global-norm clipping, KL annealing, and best-on-validation checkpointing
/// with early stopping. `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut ResVae<f32>,
    train_set: &[Slice2D],
    val_set: &[Slice2D],
    cfg: &TrainConfig,
    ctx: &LossContext<f32>,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ctx.weights.validate()?;
    ctx.ssim.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(UadError::invalid("training data", format!("{} train / {} validation slices", train_set.len(), val_set.len())));
    }
    model.check_input(&slices_to_tensor(&train_set[..1])?)?;
    let latent = model.config().latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() });
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut early = false;
    for epoch in 0..cfg.epochs {
        let mut acc = LossBreakdown::default();
        let (mut gsum, mut gmax, mut steps) = (0.0, 0.0f64, 0usize);
        for idx in make_batches(train_set.len(), cfg.batch_size, rng.random())? {
            let x = slices_to_tensor(idx.iter().map(|&i| &train_set[i]))?;
            let eps = Tensor::from_vec([idx.len(), latent, 1, 1], (0..idx.len() * latent).map(|_| StandardNormal.sample(&mut rng)).collect());
            let (recon, post, cache) = model.forward_train(&x, &eps);
            let (b, g) = total_loss(&x, &recon, &post, epoch, ctx)
                .map_err(|e| UadError::non_finite("training", format!("epoch {epoch}, step {steps}: {e}")))?;
            zero_grad(model);
            model.backward(&cache, &g.recon, &g.mu, &g.logvar);
            let norm = clip_grad_norm(model, cfg.grad_clip_norm);
            if !norm.is_finite() {
                return Err(UadError::non_finite("training", format!("gradient norm {norm} at epoch {epoch}, step {steps}")));
            }
            opt.step(model);
            acc.scaled_add(&b, idx.len() as f64 / train_set.len() as f64);
            gsum += norm;
            gmax = gmax.max(norm);
            steps += 1;
        }
        let val = evaluate_loss(model, val_set, epoch, cfg.batch_size, ctx)?;
        let improved = val.total < best.2;
        if improved {
            best = (model.clone(), epoch, val.total);
            since_best = 0;
        } else {
            since_best += 1;
        }
        let rec = EpochRecord {
            epoch,
            beta: beta_schedule(epoch, ctx.weights),
            train: acc,
            val,
            grad_norm_mean: gsum / steps as f64,
            grad_norm_max: gmax,
            best_val: best.2,
            improved,
        };
        info!("epoch {epoch}: train {:.5} (mse {:.5}) val {:.5} best {:.5}", acc.total, acc.mse, val.total, best.2);
        on_epoch(&rec)?;
        history.push(rec);
        if since_best >= cfg.patience {
            early = true;
            break;
        }
    }
    let stop_epoch = history.last().map_or(0, |r| r.epoch);
    Ok(TrainOutcome { best: best.0, best_epoch: best.1, best_val: best.2, stop_epoch, early_stopped: early, history })
}
