//! Run configuration: one TOML document with a section per pipeline module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::AugmentationPolicy;
use crate::error::{Result, UadError};
use crate::evaluate::EvalSpec;
use crate::postprocess::PostprocessConfig;
use crate::preprocess::PreprocessConfig;
use crate::resvae::ResVaeConfig;
use crate::ssim::SsimConfig;
use crate::synthgen::DdpmConfig;
use crate::training::{LossWeights, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Corpus manifest; `<out>/phantom/corpus.json` when absent.
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Whether `train` adds the filtered synthetic slices to the training set.
    pub enabled: bool,
    pub samples: usize,
    /// Samples whose best SSIM against any real training slice exceeds this are dropped.
    pub ssim_gate: f64,
    pub ddpm: DdpmConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { enabled: true, samples: 64, ssim_gate: 0.35, ddpm: DdpmConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Identity,
    /// Frozen convolutional stack (seeded, or loaded from `weights`).
    #[default]
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub extractor: ExtractorKind,
    pub width: usize,
    pub weights: Option<PathBuf>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self { extractor: ExtractorKind::Conv, width: 16, weights: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub roc_max_points: usize,
    /// Write PNG overlays of every inferred slice.
    pub overlays: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { roc_max_points: 2000, overlays: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_slices: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { n_slices: 100, warmup: 10 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitConfig,
    pub augment: AugmentationPolicy,
    pub synth: SynthConfig,
    pub model: ResVaeConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub ssim: SsimConfig,
    pub perceptual: PerceptualConfig,
    pub postprocess: PostprocessConfig,
    pub evaluate: EvalSpec,
    pub report: ReportConfig,
    pub bench: BenchConfig,
}

fn keyed(section: &str) -> impl Fn(UadError) -> UadError + '_ {
    move |e| match e {
        e @ UadError::Config { .. } => e,
        other => UadError::Config { key: section.to_string(), reason: other.to_string() },
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> UadError {
    UadError::Config { key: key.into(), reason: reason.into() }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| UadError::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate().map_err(keyed("preprocess"))?;
        if !(0.0..=1.0).contains(&self.split.train_fraction) {
            return Err(config_err("split.train_fraction", format!("{} outside [0, 1]", self.split.train_fraction)));
        }
        self.augment.validate().map_err(keyed("augment"))?;
        self.synth.ddpm.validate().map_err(keyed("synth.ddpm"))?;
        if !(-1.0..=1.0).contains(&self.synth.ssim_gate) {
            return Err(config_err("synth.ssim_gate", format!("{} outside [-1, 1]", self.synth.ssim_gate)));
        }
        if self.synth.enabled && self.synth.samples == 0 {
            return Err(config_err("synth.samples", "must be >= 1 when synth is enabled"));
        }
        self.model.validate().map_err(keyed("model"))?;
        if self.model.input_size != self.preprocess.crop_size {
            return Err(config_err(
                "model.input_size",
                format!("{} differs from preprocess.crop_size {}", self.model.input_size, self.preprocess.crop_size),
            ));
        }
        self.loss.validate().map_err(keyed("loss"))?;
        self.train.validate().map_err(keyed("train"))?;
        self.ssim.validate().map_err(keyed("ssim"))?;
        if self.perceptual.width == 0 {
            return Err(config_err("perceptual.width", "must be >= 1"));
        }
        self.postprocess.validate().map_err(keyed("postprocess"))?;
        if self.evaluate.pathologies.is_empty() {
            return Err(config_err("evaluate.pathologies", "at least one pathology is required"));
        }
        if let Some((name, _)) = self.evaluate.pathologies.iter().find(|(_, ids)| ids.is_empty() || ids.contains(&0)) {
            return Err(config_err(&format!("evaluate.pathologies.{name}"), "needs nonzero label ids"));
        }
        if self.report.roc_max_points < 3 {
            return Err(config_err("report.roc_max_points", "must be >= 3"));
        }
        if self.bench.n_slices == 0 {
            return Err(config_err("bench.n_slices", "must be >= 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn corpus_path(&self, out: &Path) -> PathBuf {
        self.paths.corpus.clone().unwrap_or_else(|| out.join("phantom").join("corpus.json"))
    }
}

pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialise");
    hex::encode(Sha256::digest(json))
}

/// Reads and validates a TOML run configuration. An empty file gives all defaults.
pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| UadError::io(path, e))?;
    RunConfig::from_toml_str(&text, path)
}

/// Per-stage seed derived from the root seed.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
