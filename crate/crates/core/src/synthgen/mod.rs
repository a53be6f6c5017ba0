//! Toy-scale unconditional DDPM for synthetic healthy slices, plus the SSIM
//! memorisation gate applied to its samples.

mod unet;

use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use unet::{timestep_embedding, Denoiser, DenoiserCache, DenoiserConfig};

use crate::error::{Result, UadError};
use crate::nn::{clip_grad_norm, zero_grad, AdamW, AdamWConfig, Archive, Tensor};
use crate::ssim::{SsimConfig, SsimReference};
use crate::volume::{slice_from_tensor, slices_to_tensor, Slice2D, SliceSource};

/// Linear beta schedule; `alpha_bar[0] = 1` so step 0 is the clean image.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(UadError::invalid("diffusion schedule", "need at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(UadError::invalid(
                "diffusion schedule",
                format!("betas must satisfy 0 < {beta_start} <= {beta_end} < 1"),
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            alpha_bar.push(alpha_bar.last().expect("seeded") * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Noise variance of step `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative signal fraction for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`; exactly `x0` at `t = 0`.
    pub fn q_sample(&self, x0: &[f32], t: usize, eps: &[f32]) -> Vec<f32> {
        if t == 0 {
            return x0.to_vec();
        }
        let a = self.alpha_bar(t).sqrt() as f32;
        let s = (1.0 - self.alpha_bar(t)).sqrt() as f32;
        x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpmConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_size: usize,
    pub denoiser: DenoiserConfig,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            timesteps: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
            train_steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            validation_size: 16,
            denoiser: DenoiserConfig { base_channels: 8, levels: 3, time_dim: 32 },
        }
    }
}

impl DdpmConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.denoiser.validate()?;
        if self.batch_size == 0 || self.validation_size == 0 {
            return Err(UadError::invalid("ddpm config", "batch_size and validation_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(UadError::invalid("ddpm config", format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Trained denoiser with the schedule and image size it was trained for.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub denoiser: Denoiser<f32>,
    pub schedule: DiffusionSchedule,
    pub config: DdpmConfig,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DiffusionMeta {
    config: DdpmConfig,
    height: usize,
    width: usize,
}

const ARCHIVE_KIND: &str = "ddpm-denoiser";

impl DiffusionModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = DiffusionMeta { config: self.config.clone(), height: self.height, width: self.width };
        Archive::from_module(&self.denoiser, ARCHIVE_KIND, serde_json::to_value(meta).expect("serialisable")).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        if archive.header.kind != ARCHIVE_KIND {
            return Err(UadError::Checkpoint { path: path.into(), reason: format!("expected {ARCHIVE_KIND}, found {}", archive.header.kind) });
        }
        let meta: DiffusionMeta = serde_json::from_value(archive.header.meta.clone())
            .map_err(|e| UadError::Checkpoint { path: path.into(), reason: format!("metadata: {e}") })?;
        let mut denoiser = Denoiser::new(meta.config.denoiser, &mut ChaCha8Rng::seed_from_u64(0))?;
        archive.restore(&mut denoiser, path)?;
        Ok(Self { denoiser, schedule: meta.config.schedule()?, config: meta.config, height: meta.height, width: meta.width })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmTrainReport {
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
    pub train_losses: Vec<f64>,
}

/// Fixed noising draws for a reproducible validation loss.
struct NoisedBatch {
    x_t: Tensor<f32>,
    t: Vec<usize>,
    eps: Vec<f32>,
}

fn noise_batch(x0: &Tensor<f32>, schedule: &DiffusionSchedule, rng: &mut impl Rng) -> NoisedBatch {
    let n = x0.n();
    let len = x0.sample_len();
    let mut data = Vec::with_capacity(x0.len());
    let mut eps_all = Vec::with_capacity(x0.len());
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let step = rng.random_range(1..=schedule.steps());
        let eps: Vec<f32> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        data.extend(schedule.q_sample(x0.sample(i), step, &eps));
        eps_all.extend(eps);
        t.push(step);
    }
    NoisedBatch { x_t: Tensor::from_vec(x0.shape(), data), t, eps: eps_all }
}

fn mse(pred: &Tensor<f32>, target: &[f32]) -> f64 {
    pred.data().iter().zip(target).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / target.len() as f64
}

/// Pixels in [0, 1] mapped to the model's [-1, 1] range.
fn to_model_range(slices: &[&Slice2D]) -> Result<Tensor<f32>> {
    Ok(slices_to_tensor(slices.iter().copied())?.map(|v| 2.0 * v - 1.0))
}

pub fn validation_loss(model: &Denoiser<f32>, batch: &[&Slice2D], schedule: &DiffusionSchedule, seed: u64) -> Result<f64> {
    let x0 = to_model_range(batch)?;
    let nb = noise_batch(&x0, schedule, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(mse(&model.forward(&nb.x_t, &nb.t), &nb.eps))
}

/// Trains the noise predictor with the simple `|eps - eps_hat|^2` objective.
pub fn ddpm_train(slices: &[Slice2D], config: &DdpmConfig, seed: u64) -> Result<(DiffusionModel, DdpmTrainReport)> {
    config.validate()?;
    if slices.is_empty() {
        return Err(UadError::invalid("ddpm training set", "no slices"));
    }
    let schedule = config.schedule()?;
    let (h, w) = (slices[0].height(), slices[0].width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut denoiser = Denoiser::<f32>::new(config.denoiser, &mut rng)?;
    denoiser.check_input(&Tensor::zeros([1, 1, h, w]), &[0])?;

    let val: Vec<&Slice2D> = (0..config.validation_size.min(slices.len())).map(|i| &slices[i * slices.len() / config.validation_size.min(slices.len())]).collect();
    let val_seed = seed ^ 0x5eed_0f_7a1;
    let initial = validation_loss(&denoiser, &val, &schedule, val_seed)?;
    info!("ddpm: {} slices, T={}, initial validation loss {initial:.4}", slices.len(), schedule.steps());

    let mut opt = AdamW::new(AdamWConfig { lr: config.learning_rate, weight_decay: 0.0, ..Default::default() });
    let mut losses = Vec::with_capacity(config.train_steps);
    for step in 0..config.train_steps {
        let batch: Vec<&Slice2D> = (0..config.batch_size.min(slices.len())).map(|_| &slices[rng.random_range(0..slices.len())]).collect();
        let nb = noise_batch(&to_model_range(&batch)?, &schedule, &mut rng);
        let (pred, cache) = denoiser.forward_cached(&nb.x_t, &nb.t);
        let loss = mse(&pred, &nb.eps);
        if !loss.is_finite() {
            return Err(UadError::non_finite("ddpm training", format!("loss {loss} at step {step} (timesteps {:?})", nb.t)));
        }
        let scale = 2.0 / nb.eps.len() as f32;
        let g = Tensor::from_vec(pred.shape(), pred.data().iter().zip(&nb.eps).map(|(&p, &e)| scale * (p - e)).collect());
        zero_grad(&mut denoiser);
        denoiser.backward(&cache, &g);
        clip_grad_norm(&mut denoiser, 1.0);
        opt.step(&mut denoiser);
        losses.push(loss);
        if step % 50 == 0 {
            debug!("ddpm step {step}: loss {loss:.4}");
        }
    }
    let final_loss = validation_loss(&denoiser, &val, &schedule, val_seed)?;
    info!("ddpm: final validation loss {final_loss:.4}");
    let model = DiffusionModel { denoiser, schedule, config: config.clone(), height: h, width: w };
    Ok((model, DdpmTrainReport { initial_validation_loss: initial, final_validation_loss: final_loss, train_losses: losses }))
}

/// Ancestral sampling. Sample `i` draws all its noise from stream `i` of `seed`, so a
/// sample depends only on `(seed, i)` and not on how many others are drawn.
pub fn ddpm_sample(model: &DiffusionModel, n: usize, seed: u64) -> Result<Vec<Slice2D>> {
    if n == 0 {
        return Err(UadError::invalid("sample count", "n must be >= 1"));
    }
    let (h, w) = (model.height, model.width);
    let s = &model.schedule;
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Vec<f32> {
        rngs.iter_mut().flat_map(|r| (0..h * w).map(|_| StandardNormal.sample(r)).collect::<Vec<f32>>()).collect()
    };
    let mut x = Tensor::from_vec([n, 1, h, w], draw(&mut rngs));
    for t in (1..=s.steps()).rev() {
        let eps = model.denoiser.forward(&x, &vec![t; n]);
        let beta = s.beta(t);
        let ab = s.alpha_bar(t);
        let coef = (beta / (1.0 - ab).sqrt()) as f32;
        let inv = (1.0 / (1.0 - beta).sqrt()) as f32;
        let mut next = x.zip_map(&eps, |xv, ev| inv * (xv - coef * ev));
        if t > 1 {
            let sigma = (beta * (1.0 - s.alpha_bar(t - 1)) / (1.0 - ab)).sqrt() as f32;
            for (v, z) in next.data_mut().iter_mut().zip(draw(&mut rngs)) {
                *v += sigma * z;
            }
        }
        if !next.all_finite() {
            return Err(UadError::non_finite("ddpm sampling", format!("step {t}")));
        }
        x = next;
    }
    let x = x.map(|v| (v + 1.0) / 2.0);
    (0..n)
        .map(|i| slice_from_tensor(&x, i, SliceSource { case_id: format!("synthetic-s{seed}"), index: i }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub sample_id: String,
    pub max_ssim: f64,
    pub nearest_real_id: String,
    pub kept: bool,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<Slice2D>,
    pub rejected: Vec<Slice2D>,
    pub report: Vec<FilterRecord>,
}

pub fn slice_id(s: &SliceSource) -> String {
    format!("{}#{}", s.case_id, s.index)
}

/// Rejects samples whose best SSIM against any real slice is strictly above `threshold`.
pub fn memorization_filter(samples: &[Slice2D], real: &[Slice2D], threshold: f64, cfg: &SsimConfig) -> Result<FilterOutcome> {
    if samples.is_empty() || real.is_empty() {
        return Err(UadError::invalid("memorisation filter", "sample and real sets must be nonempty"));
    }
    let refs = real.iter().map(|r| SsimReference::new(r, cfg)).collect::<Result<Vec<_>>>()?;
    let mut out = FilterOutcome { kept: Vec::new(), rejected: Vec::new(), report: Vec::new() };
    for s in samples {
        let probe = SsimReference::new(s, cfg)?;
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, r) in refs.iter().enumerate() {
            let v = probe.ssim(r)?;
            if v > best.0 {
                best = (v, j);
            }
        }
        let kept = !(best.0 > threshold);
        out.report.push(FilterRecord {
            sample_id: slice_id(s.source()),
            max_ssim: best.0,
            nearest_real_id: slice_id(real[best.1].source()),
            kept,
        });
        if kept {
            out.kept.push(s.clone());
        } else {
            out.rejected.push(s.clone());
        }
    }
    Ok(out)
}

pub fn filter_report_csv(report: &[FilterRecord]) -> String {
    let mut s = String::from("sample_id,max_ssim,nearest_real_id,decision\n");
    for r in report {
        s.push_str(&format!("{},{:.6},{},{}\n", r.sample_id, r.max_ssim, r.nearest_real_id, if r.kept { "kept" } else { "rejected" }));
    }
    s
}
