//! Stage orchestration: manifests, config hashes and skip-if-unchanged reruns.
//!
//! Every stage writes `<out>/<stage dir>/manifest.json` recording the run config hash,
//! a hash of its inputs (stage-relevant config plus upstream manifests) and the SHA-256
//! of each output file. A stage whose input hash and outputs are unchanged is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{hash_json, stage_seed, ExtractorKind, RunConfig};
use crate::dataset::{expand_training_set, extract_slices, split_patient_keys, stack_slices, Partition, SplitSpec};
use crate::error::{Result, UadError};
use crate::evaluate::{latency_bench, lesion_volume, metrics_csv, roc_points_csv, roc_svg, stratify, EvalCase, StratifyBy};
use crate::io::{
    load_mask, load_metadata, load_volume, read_description, read_json, save_mask, save_metadata, save_volume,
    save_volume_described, write_json, write_text,
};
use crate::phantom::{make_phantom_corpus, phantom_label_names, LesionKind};
use crate::postprocess::{apply_pipeline, maps_to_volume, save_overlay_png, MapProvenance};
use crate::preprocess::{preprocess_case, BoundingBox};
use crate::resvae::{load_checkpoint, save_checkpoint, CheckpointMeta, ResVae};
use crate::synthgen::{ddpm_sample, ddpm_train, filter_report_csv, memorization_filter, DiffusionModel};
use crate::training::{train, ConvExtractor, FeatureExtractor, IdentityExtractor, LossContext};
use crate::volume::{AnnotatedCase, Slice2D, SliceSource};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Preprocess,
    SynthTrain,
    SynthSample,
    SynthFilter,
    Train,
    Infer,
    Evaluate,
    Bench,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Preprocess,
        Stage::SynthTrain,
        Stage::SynthSample,
        Stage::SynthFilter,
        Stage::Train,
        Stage::Infer,
        Stage::Evaluate,
        Stage::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::SynthTrain => "synth-train",
            Stage::SynthSample => "synth-sample",
            Stage::SynthFilter => "synth-filter",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Evaluate => "evaluate",
            Stage::Bench => "bench",
        }
    }

    /// Directory under the output root.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::SynthTrain => "synth/ddpm",
            Stage::SynthSample => "synth/samples",
            Stage::SynthFilter => "synth/filter",
            other => other.name(),
        }
    }

    /// Comma-separated stage names; `synth` expands to its three sub-stages and `all` to every stage.
    pub fn parse_list(s: &str) -> Result<BTreeSet<Stage>> {
        let mut out = BTreeSet::new();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "all" => out.extend(Stage::ALL),
                "synth" => out.extend([Stage::SynthTrain, Stage::SynthSample, Stage::SynthFilter]),
                _ => {
                    let st = Stage::ALL
                        .into_iter()
                        .find(|st| st.name() == name)
                        .ok_or_else(|| UadError::invalid("stage list", format!("unknown stage {name:?}")))?;
                    out.insert(st);
                }
            }
        }
        if out.is_empty() {
            return Err(UadError::invalid("stage list", "no stages given"));
        }
        Ok(out)
    }
}

/// Whether a corpus case feeds training (healthy pool) or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Eval,
}

/// Input listing; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub label_names: BTreeMap<u16, String>,
    pub cases: Vec<CorpusCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusCase {
    pub case_id: String,
    pub role: Role,
    pub image: PathBuf,
    /// Annotator → mask file. The first entry in annotator order is not special;
    /// the evaluation reference annotator is chosen in the config.
    pub masks: BTreeMap<String, PathBuf>,
    pub metadata: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub code_version: String,
    pub config_hash: String,
    pub input_hash: String,
    pub seed: u64,
    /// Output path relative to the stage directory → SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedEntry {
    pub case_id: String,
    pub role: Role,
    pub patient_key: String,
    pub image: String,
    pub masks: BTreeMap<String, String>,
    pub metadata: String,
    pub bbox: BoundingBox,
    pub truncated_voxels: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessDetails {
    pub label_names: BTreeMap<u16, String>,
    pub cases: Vec<PreprocessedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredCase {
    pub case_id: String,
    pub heatmap: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferDetails {
    pub checkpoint_id: String,
    pub cases: Vec<InferredCase>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: Stage,
    pub skipped: bool,
    pub summary: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| UadError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Header description stamped into every heatmap volume.
pub fn provenance_tag(config_hash: &str, checkpoint_id: &str) -> String {
    format!("uad cfg={} ckpt={checkpoint_id} v={CODE_VERSION}", &config_hash[..16.min(config_hash.len())])
}

/// Extracts the `cfg=` token from a provenance tag.
pub fn tag_config_hash(tag: &str) -> Option<&str> {
    tag.split_whitespace().find_map(|t| t.strip_prefix("cfg="))
}

/// Writes `n_healthy` training phantoms and `n_lesioned` evaluation phantoms (half
/// `disc`, half `diffuse`) under `dir`, returning the corpus manifest path.
pub fn write_phantom_corpus(dir: &Path, n_healthy: usize, n_lesioned: usize, seed: u64) -> Result<PathBuf> {
    let mut entries = Vec::new();
    let mut emit = |cases: Vec<AnnotatedCase>, role: Role| -> Result<()> {
        for c in cases {
            let id = c.volume.id().to_string();
            let case_dir = dir.join("cases").join(&id);
            save_volume(&c.volume, case_dir.join("image.nii.gz"))?;
            let mut masks = BTreeMap::new();
            for m in &c.masks {
                let p = case_dir.join(format!("mask_{}.nii.gz", m.annotator()));
                save_mask(m, c.volume.spacing(), &p)?;
                masks.insert(m.annotator().to_string(), PathBuf::from(rel(&p, dir)));
            }
            save_metadata(&c.metadata, case_dir.join("metadata.json"))?;
            entries.push(CorpusCase {
                case_id: id,
                role,
                image: PathBuf::from(rel(&case_dir.join("image.nii.gz"), dir)),
                masks,
                metadata: PathBuf::from(rel(&case_dir.join("metadata.json"), dir)),
            });
        }
        Ok(())
    };
    emit(make_phantom_corpus(n_healthy.max(1), stage_seed(seed, "phantom-none"), LesionKind::None)?, Role::Train)?;
    let n_disc = n_lesioned.div_ceil(2);
    if n_disc > 0 {
        emit(make_phantom_corpus(n_disc, stage_seed(seed, "phantom-disc"), LesionKind::Disc)?, Role::Eval)?;
    }
    if n_lesioned - n_disc > 0 {
        emit(make_phantom_corpus(n_lesioned - n_disc, stage_seed(seed, "phantom-diffuse"), LesionKind::Diffuse)?, Role::Eval)?;
    }
    let path = dir.join("corpus.json");
    write_json(&CorpusManifest { label_names: phantom_label_names(), cases: entries }, &path)?;
    Ok(path)
}

pub struct Pipeline<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    force: bool,
    config_hash: String,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a RunConfig, out: impl Into<PathBuf>) -> Self {
        Self { cfg, out: out.into(), force: false, config_hash: cfg.hash() }
    }

    /// Rerun stages even when their manifests are current.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn stage_dir(&self, s: Stage) -> PathBuf {
        self.out.join(s.dir())
    }

    pub fn manifest_path(&self, s: Stage) -> PathBuf {
        self.stage_dir(s).join("manifest.json")
    }

    pub fn load_manifest(&self, s: Stage) -> Result<Manifest> {
        let path = self.manifest_path(s);
        if !path.exists() {
            return Err(UadError::MissingInput { path, hint: format!("run `uad {}` first", s.name()) });
        }
        read_json(&path)
    }

    fn dependencies(&self, s: Stage) -> Vec<Stage> {
        match s {
            Stage::Preprocess => vec![],
            Stage::SynthTrain => vec![Stage::Preprocess],
            Stage::SynthSample => vec![Stage::SynthTrain],
            Stage::SynthFilter => vec![Stage::SynthSample, Stage::Preprocess],
            Stage::Train if self.cfg.synth.enabled => vec![Stage::Preprocess, Stage::SynthFilter],
            Stage::Train => vec![Stage::Preprocess],
            Stage::Infer | Stage::Evaluate | Stage::Bench => {
                vec![Stage::Preprocess, if s == Stage::Evaluate { Stage::Infer } else { Stage::Train }]
            }
        }
    }

    fn stage_config(&self, s: Stage) -> serde_json::Value {
        let c = self.cfg;
        match s {
            Stage::Preprocess => json!({ "preprocess": c.preprocess }),
            Stage::SynthTrain => json!({ "ddpm": c.synth.ddpm, "split": c.split, "seed": c.seed }),
            Stage::SynthSample => json!({ "samples": c.synth.samples, "seed": c.seed }),
            Stage::SynthFilter => json!({ "gate": c.synth.ssim_gate, "ssim": c.ssim, "split": c.split, "seed": c.seed }),
            Stage::Train => json!({
                "model": c.model, "loss": c.loss, "train": c.train, "ssim": c.ssim, "perceptual": c.perceptual,
                "augment": c.augment, "split": c.split, "synth": c.synth.enabled, "seed": c.seed,
            }),
            Stage::Infer => json!({ "postprocess": c.postprocess, "overlays": c.report.overlays }),
            Stage::Evaluate => json!({ "evaluate": c.evaluate, "roc_max_points": c.report.roc_max_points }),
            Stage::Bench => json!({ "bench": c.bench }),
        }
    }

    fn input_hash(&self, s: Stage) -> Result<String> {
        let mut deps = BTreeMap::new();
        for d in self.dependencies(s) {
            let path = self.manifest_path(d);
            if !path.exists() {
                return Err(UadError::MissingInput {
                    path,
                    hint: format!("`{}` needs the {} manifest; run `uad {}` first", s.name(), d.name(), d.name()),
                });
            }
            deps.insert(d.name(), sha256_file(&path)?);
        }
        if s == Stage::Preprocess {
            deps.insert("corpus", self.corpus_digest()?);
        }
        Ok(hash_json(&json!({ "stage": s.name(), "code": CODE_VERSION, "config": self.stage_config(s), "deps": deps })))
    }

    fn corpus_digest(&self) -> Result<String> {
        let path = self.cfg.corpus_path(&self.out);
        let corpus = self.corpus()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut h = Sha256::new();
        h.update(sha256_file(&path)?);
        for c in &corpus.cases {
            for p in std::iter::once(&c.image).chain(c.masks.values()).chain([&c.metadata]) {
                h.update(sha256_file(&base.join(p))?);
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn corpus(&self) -> Result<CorpusManifest> {
        let path = self.cfg.corpus_path(&self.out);
        if !path.exists() {
            return Err(UadError::MissingInput {
                path,
                hint: "set paths.corpus in the config or run `uad phantom` to generate a corpus".into(),
            });
        }
        read_json(&path)
    }

    fn up_to_date(&self, s: Stage, input_hash: &str) -> bool {
        if self.force {
            return false;
        }
        let Ok(m) = read_json::<Manifest>(self.manifest_path(s)) else { return false };
        m.input_hash == input_hash
            && m.outputs.iter().all(|(p, h)| sha256_file(&self.stage_dir(s).join(p)).is_ok_and(|d| &d == h))
    }

    fn finish(&self, s: Stage, input_hash: String, seed: u64, outputs: &[PathBuf], details: serde_json::Value) -> Result<()> {
        let dir = self.stage_dir(s);
        let mut map = BTreeMap::new();
        for p in outputs {
            map.insert(rel(p, &dir), sha256_file(p)?);
        }
        let m = Manifest {
            stage: s.name().into(),
            code_version: CODE_VERSION.into(),
            config_hash: self.config_hash.clone(),
            input_hash,
            seed,
            outputs: map,
            details,
        };
        write_json(&m, self.manifest_path(s))
    }

    /// Runs the requested stages in pipeline order.
    pub fn run(&self, stages: &BTreeSet<Stage>) -> Result<Vec<StageReport>> {
        stages.iter().map(|&s| self.run_stage(s)).collect()
    }

    pub fn run_stage(&self, s: Stage) -> Result<StageReport> {
        let input_hash = self.input_hash(s)?;
        if self.up_to_date(s, &input_hash) {
            info!("{}: up to date, skipped", s.name());
            return Ok(StageReport { stage: s, skipped: true, summary: "up to date".into() });
        }
        let dir = self.stage_dir(s);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| UadError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| UadError::io(&dir, e))?;
        info!("{}: running", s.name());
        let seed = stage_seed(self.cfg.seed, s.name());
        let (outputs, details, summary) = match s {
            Stage::Preprocess => self.preprocess()?,
            Stage::SynthTrain => self.synth_train(seed)?,
            Stage::SynthSample => self.synth_sample(seed)?,
            Stage::SynthFilter => self.synth_filter()?,
            Stage::Train => self.train(seed)?,
            Stage::Infer => self.infer()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Bench => self.bench()?,
        };
        self.finish(s, input_hash, seed, &outputs, details)?;
        info!("{}: {summary}", s.name());
        Ok(StageReport { stage: s, skipped: false, summary })
    }

    fn preprocess(&self) -> Result<(Vec<PathBuf>, serde_json::Value, String)> {
        let corpus_path = self.cfg.corpus_path(&self.out);
        let base = corpus_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let corpus = self.corpus()?;
        let dir = self.stage_dir(Stage::Preprocess);
        let mut outputs = Vec::new();
        let mut entries = Vec::new();
        for c in &corpus.cases {
            let volume = load_volume(base.join(&c.image))?.with_id(&c.case_id);
            let mut masks = Vec::new();
            for (annotator, p) in &c.masks {
                masks.push(load_mask(base.join(p), &corpus.label_names, annotator)?);
            }
            let metadata = load_metadata(base.join(&c.metadata))?;
            let done = preprocess_case(&volume, &masks, &self.cfg.preprocess)
                .map_err(|e| UadError::invalid(format!("case {}", c.case_id), e.to_string()))?;
            let case_dir = dir.join("cases").join(&c.case_id);
            let image = case_dir.join("image.nii.gz");
            save_volume(&done.volume, &image)?;
            outputs.push(image.clone());
            let mut mask_paths = BTreeMap::new();
            for m in &done.masks {
                let p = case_dir.join(format!("mask_{}.nii.gz", m.annotator()));
                save_mask(m, done.volume.spacing(), &p)?;
                mask_paths.insert(m.annotator().to_string(), rel(&p, &dir));
                outputs.push(p);
            }
            let meta_path = case_dir.join("metadata.json");
            save_metadata(&metadata, &meta_path)?;
            outputs.push(meta_path.clone());
            entries.push(PreprocessedEntry {
                case_id: c.case_id.clone(),
                role: c.role,
                patient_key: metadata.patient_key.clone(),
                image: rel(&image, &dir),
                masks: mask_paths,
                metadata: rel(&meta_path, &dir),
                bbox: done.bbox,
                truncated_voxels: done.truncated_voxels,
                notes: done.notes,
            });
        }
        let summary = format!("{} cases", entries.len());
        let details = PreprocessDetails { label_names: corpus.label_names, cases: entries };
        Ok((outputs, serde_json::to_value(details).expect("serialisable"), summary))
    }

    fn preprocessed(&self) -> Result<PreprocessDetails> {
        let m = self.load_manifest(Stage::Preprocess)?;
        serde_json::from_value(m.details).map_err(|e| UadError::Parse { path: self.manifest_path(Stage::Preprocess), message: e.to_string() })
    }

    fn case_slices(&self, e: &PreprocessedEntry) -> Result<(Vec<Slice2D>, [f32; 3])> {
        let v = load_volume(self.stage_dir(Stage::Preprocess).join(&e.image))?.with_id(&e.case_id);
        Ok((extract_slices(&v, self.cfg.preprocess.crop_size)?, v.spacing()))
    }

    /// Slices of the training-role cases, split by patient into (train, validation).
    fn training_slices(&self, d: &PreprocessDetails) -> Result<(Vec<Slice2D>, Vec<Slice2D>)> {
        let pool: Vec<&PreprocessedEntry> = d.cases.iter().filter(|c| c.role == Role::Train).collect();
        let spec = SplitSpec { train_fraction: self.cfg.split.train_fraction, seed: stage_seed(self.cfg.seed, "split") };
        let assignment = split_patient_keys(pool.iter().map(|c| c.patient_key.as_str()), &spec)?;
        let (mut tr, mut va) = (Vec::new(), Vec::new());
        for c in pool {
            let (s, _) = self.case_slices(c)?;
            match assignment[&c.patient_key] {
                Partition::Train => tr.extend(s),
                Partition::Val => va.extend(s),
            }
        }
        Ok((tr, va))
    }

    fn synth_train(&self, seed: u64) -> Result<(Vec<PathBuf>, serde_json::Value, String)> {
        let (tr, _) = self.training_slices(&self.preprocessed()?)?;
        let (model, report) = ddpm_train(&tr, &self.cfg.synth.ddpm, seed)?;
        let dir = self.stage_dir(Stage::SynthTrain);
        let path = dir.join("model.bin");
        model.save(&path)?;
        let summary = format!(
            "validation noise-prediction loss {:.4} -> {:.4}",
            report.initial_validation_loss, report.final_validation_loss
        );
        Ok((vec![path], serde_json::to_value(&report).expect("serialisable"), summary))
    }

    fn synth_sample(&self, seed: u64) -> Result<(Vec<PathBuf>, serde_json::Value, String)> {
        let model = DiffusionModel::load(&self.stage_dir(Stage::SynthTrain).join("model.bin"))?;
        let samples = ddpm_sample(&model, self.cfg.synth.samples, seed)?;
        let path = self.stage_dir(Stage::SynthSample).join("samples.nii.gz");
        save_volume_described(&stack_slices("samples", &samples, [1.0; 3])?, &path, &provenance_tag(&self.config_hash, "ddpm"))?;
        Ok((vec![path], json!({ "samples": samples.len(), "source": format!("synthetic-s{seed}") }), format!("{} samples", samples.len())))
    }

    fn synth_filter(&self) -> Result<(Vec<PathBuf>, serde_json::Value, String)> {
        let (real, _) = self.training_slices(&self.preprocessed()?)?;
        let v = load_volume(self.stage_dir(Stage::SynthSample).join("samples.nii.gz"))?;
        let samples: Vec<Slice2D> = extract_slices(&v, v.shape()[0])?
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.with_source(SliceSource { case_id: "synthetic".into(), index: i }))
            .collect();
        let out = memorization_filter(&samples, &real, self.cfg.synth.ssim_gate, &self.cfg.ssim)?;
        let dir = self.stage_dir(Stage::SynthFilter);
        let report = dir.join("filter_report.csv");
        write_text(&report, &filter_report_csv(&out.report))?;
        let mut outputs = vec![report];
        if !out.kept.is_empty() {
            let kept = dir.join("kept.nii.gz");
            save_volume(&stack_slices("kept", &out.kept, [1.0; 3])?, &kept)?;
            outputs.push(kept);
        }
        let summary = format!("{} kept, {} rejected at SSIM > {}", out.kept.len(), out.rejected.len(), self.cfg.synth.ssim_gate);
        Ok((outputs, json!({ "kept": out.kept.len(), "rejected": out.rejected.len() }), summary))
    }

    fn extractor(&self) -> Result<Box<dyn FeatureExtractor<f32>>> {
        let p = &self.cfg.perceptual;
        Ok(match (p.extractor, &p.weights) {
            (ExtractorKind::Identity, _) => Box::new(IdentityExtractor),
            (ExtractorKind::Conv, Some(path)) => Box::new(ConvExtractor::<f32>::load(path)?),
            (ExtractorKind::Conv, None) => Box::new(ConvExtractor::<f32>::random(p.width, stage_seed(self.cfg.seed, "perceptual"))),
        })
    }

    fn train(&self, seed: u64) -> Result<(Vec<PathBuf>, serde_json::Value, String)> {
        let (mut tr, va) = self.training_slices(&self.preprocessed()?)?;
        let mut synthetic = 0;
        if self.cfg.synth.enabled {
            let kept = self.stage_dir(Stage::SynthFilter).join("kept.nii.gz");
            if kept.exists() {
                let v = load_volume(&kept)?;
                let s = extract_slices(&v, v.shape()[0])?;
                synthetic = s.len();
                tr.extend(s);
            }
        }
        let tr = expand_training_set(&tr, &self.cfg.augment, stage_seed(seed, "augment"))?;
        let mut model = ResVae::<f32>::new(self.cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(stage_seed(seed, "init")))?;
        let extractor = self.extractor()?;
        let ctx = LossContext { weights: &self.cfg.loss, ssim: &self.cfg.ssim, extractor: extractor.as_ref() };
        let mut history = String::from("epoch,beta,train_total,train_mse,train_ssim,train_kl,train_perceptual,val_total,grad_norm_mean,grad_norm_max,improved\n");
        let outcome = train(&mut model, &tr, &va, &self.cfg.train, &ctx, stage_seed(seed, "batches"), |r| {
            info!("epoch {:>3}: train {:.5} val {:.5}{}", r.epoch, r.train.total, r.val.total, if r.improved { " *" } else { "" });
            let _ = writeln!(
                history,
                "{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{}",
                r.epoch, r.beta, r.train.total, r.train.mse, r.train.ssim, r.train.kl, r.train.perceptual, r.val.total,
                r.grad_norm_mean, r.grad_norm_max, r.improved
            );
            Ok(())
        })?;
        let dir = self.stage_dir(Stage::Train);
        let ckpt = dir.join("checkpoint.bin");
        let meta = CheckpointMeta {
            config: self.cfg.model.clone(),
            epoch: outcome.best_epoch,
            val_loss: outcome.best_val,
            config_hash: self.config_hash.clone(),
        };
        save_checkpoint(&outcome.best, &meta, &ckpt)?;
        let hist = dir.join("history.csv");
        write_text(&hist, &history)?;
        let checkpoint_id = sha256_file(&ckpt)?[..16].to_string();
        let summary = format!(
            "best val {:.5} at epoch {} of {}{}; checkpoint {checkpoint_id}",
            outcome.best_val,
            outcome.best_epoch,
            outcome.stop_epoch + 1,
            if outcome.early_stopped { " (early stop)" } else { "" }
        );
        let details = json!({
            "checkpoint_id": checkpoint_id, "best_epoch": outcome.best_epoch, "best_val": outcome.best_val,
            "stop_epoch": outcome.stop_epoch, "early_stopped": outcome.early_stopped,
            "train_slices": tr.len(), "val_slices": va.len(), "synthetic_slices": synthetic,
        });
        Ok((vec![ckpt, hist], details, summary))
    }

    fn checkpoint(&self) -> Result<(ResVae<f32>, String)> {
        let m = self.load_manifest(Stage::Train)?;
        let id = m.details["checkpoint_id"].as_str().unwrap_or_default().to_string();
        let (model, _) = load_checkpoint(&self.stage_dir(Stage::Train).join("checkpoint.bin"), Some(&self.cfg.model))?;
        Ok((model, id))
    }

    fn infer(&self) -> Result<(Vec<PathBuf>, serde_json::Value, String)> {
        let d = self.preprocessed()?;
        let (model, checkpoint_id) = self.checkpoint()?;
        let dir = self.stage_dir(Stage::Infer);
        let tag = provenance_tag(&self.config_hash, &checkpoint_id);
        let mut outputs = Vec::new();
        let mut cases = Vec::new();
        for e in d.cases.iter().filter(|c| c.role == Role::Eval) {
            let (slices, spacing) = self.case_slices(e)?;
            let recon = model.reconstruct_slices(&slices)?;
            let mut maps = Vec::with_capacity(slices.len());
            for (z, (x, r)) in slices.iter().zip(&recon).enumerate() {
                let map = apply_pipeline(x, r, &self.cfg.postprocess)?.with_provenance(MapProvenance {
                    case_id: e.case_id.clone(),
                    slice_index: z,
                    checkpoint_id: checkpoint_id.clone(),
                    config_hash: self.config_hash.clone(),
                });
                if self.cfg.report.overlays {
                    let p = dir.join("overlays").join(format!("{}_z{z:02}.png", e.case_id));
                    save_overlay_png(x, &map, &p)?;
                    outputs.push(p);
                }
                maps.push(map);
            }
            let path = dir.join("heatmaps").join(format!("{}.nii.gz", e.case_id));
            save_volume_described(&maps_to_volume(&e.case_id, &maps, spacing)?, &path, &tag)?;
            cases.push(InferredCase { case_id: e.case_id.clone(), heatmap: rel(&path, &dir) });
            outputs.push(path);
        }
        if cases.is_empty() {
            return Err(UadError::invalid("corpus", "no cases with role `eval` to run inference on"));
        }
        let summary = format!("{} heatmap volumes", cases.len());
        Ok((outputs, serde_json::to_value(InferDetails { checkpoint_id, cases }).expect("serialisable"), summary))
    }

    fn evaluate(&self) -> Result<(Vec<PathBuf>, serde_json::Value, String)> {
        let d = self.preprocessed()?;
        let im = self.load_manifest(Stage::Infer)?;
        let inferred: InferDetails =
            serde_json::from_value(im.details.clone()).map_err(|e| UadError::Parse { path: self.manifest_path(Stage::Infer), message: e.to_string() })?;
        let infer_dir = self.stage_dir(Stage::Infer);
        let pre_dir = self.stage_dir(Stage::Preprocess);
        let by_id: BTreeMap<&str, &PreprocessedEntry> = d.cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
        let mut hashes = BTreeSet::new();
        let mut cases = Vec::new();
        let mut volumes = String::from("case_id,pathology,voxels,volume_ml\n");
        for c in &inferred.cases {
            let path = infer_dir.join(&c.heatmap);
            let tag = read_description(&path)?;
            hashes.insert(tag_config_hash(&tag).unwrap_or("missing").to_string());
            let e = by_id
                .get(c.case_id.as_str())
                .ok_or_else(|| UadError::invalid("infer manifest", format!("case {} is not in the preprocess manifest", c.case_id)))?;
            let heat = load_volume(&path)?;
            let mut masks = Vec::new();
            for (annotator, p) in &e.masks {
                masks.push(load_mask(pre_dir.join(p), &d.label_names, annotator)?);
            }
            let metadata = load_metadata(pre_dir.join(&e.metadata))?;
            let reference = masks.iter().find(|m| m.annotator() == self.cfg.evaluate.reference_annotator).or(masks.first());
            if let Some(m) = reference {
                for (name, ids) in &self.cfg.evaluate.pathologies {
                    let voxels: usize = ids.iter().map(|&l| m.count(l)).sum();
                    let ml: f64 = ids.iter().map(|&l| lesion_volume(m, l, heat.spacing())).sum();
                    let _ = writeln!(volumes, "{},{name},{voxels},{ml:.6}", c.case_id);
                }
            }
            cases.push(EvalCase { case_id: c.case_id.clone(), heatmap: heat.into_voxels(), masks, metadata });
        }
        if hashes.len() > 1 {
            return Err(UadError::invalid("heatmaps", format!("refusing to mix config hashes {hashes:?} in one report")));
        }
        let dir = self.stage_dir(Stage::Evaluate);
        let provenance = format!("config_hash={} checkpoint={} version={CODE_VERSION}", im.config_hash, inferred.checkpoint_id);
        let mut outputs = Vec::new();
        let mut notes = String::new();
        let mut headline = String::new();
        for (by, name) in [(StratifyBy::Pathology, "pathology"), (StratifyBy::Position, "position"), (StratifyBy::Annotator, "annotator")] {
            let rep = stratify(&cases, by, &self.cfg.evaluate)?;
            for n in &rep.notes {
                let _ = writeln!(notes, "{name}: {n}");
            }
            let table = dir.join(format!("metrics_{name}.csv"));
            write_text(&table, &metrics_csv(&rep.rows, &provenance))?;
            let roc = dir.join(format!("roc_{name}.csv"));
            write_text(&roc, &roc_points_csv(&rep.curves, self.cfg.report.roc_max_points))?;
            outputs.extend([table, roc]);
            if by == StratifyBy::Pathology {
                let svg = dir.join("roc_pathology.svg");
                write_text(&svg, &roc_svg(&rep.curves))?;
                outputs.push(svg);
                headline = rep.rows.iter().map(|r| format!("{} AUC {:.3}", r.stratum, r.auc)).collect::<Vec<_>>().join(", ");
            }
        }
        let vol = dir.join("volumes.csv");
        write_text(&vol, &volumes)?;
        let notes_path = dir.join("notes.txt");
        write_text(&notes_path, &notes)?;
        outputs.extend([vol, notes_path]);
        Ok((outputs, json!({ "cases": cases.len(), "heatmap_config_hash": im.config_hash }), headline))
    }

    fn bench(&self) -> Result<(Vec<PathBuf>, serde_json::Value, String)> {
        let d = self.preprocessed()?;
        let (model, checkpoint_id) = self.checkpoint()?;
        let source = d
            .cases
            .iter()
            .find(|c| c.role == Role::Eval)
            .or(d.cases.first())
            .ok_or_else(|| UadError::invalid("bench", "preprocess manifest lists no cases"))?;
        let (slices, _) = self.case_slices(source)?;
        let r = latency_bench(&model, &slices, self.cfg.bench.n_slices, self.cfg.bench.warmup)?;
        let dir = self.stage_dir(Stage::Bench);
        let txt = dir.join("latency.txt");
        write_text(&txt, &format!("checkpoint: {checkpoint_id}\n{}", r.render()))?;
        let js = dir.join("latency.json");
        write_json(&r, &js)?;
        let summary = format!("{:.3} ms/slice, {:.1} FPS, {:.4} s/volume", r.ms_per_slice, r.fps, r.s_per_volume);
        Ok((vec![txt, js], serde_json::to_value(r).expect("serialisable"), summary))
    }
}

/// Runs `stages` for `cfg` under `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, stages: &BTreeSet<Stage>, force: bool) -> Result<Vec<StageReport>> {
    Pipeline::new(cfg, out).force(force).run(stages)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists() {
        let s = Stage::parse_list("synth,train").unwrap();
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec![Stage::SynthTrain, Stage::SynthSample, Stage::SynthFilter, Stage::Train]);
        assert_eq!(Stage::parse_list("all").unwrap().len(), 8);
        assert!(Stage::parse_list("fit").is_err());
        assert!(Stage::parse_list("").is_err());
    }

    #[test]
    fn tags_round_trip() {
        let tag = provenance_tag(&"ab".repeat(32), "0123456789abcdef");
        assert!(tag.len() < 80);
        assert_eq!(tag_config_hash(&tag), Some("abababababababab"));
    }

    #[test]
    fn missing_dependency_names_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let e = Pipeline::new(&cfg, dir.path()).run_stage(Stage::Train).unwrap_err();
        assert!(e.is_validation());
        let msg = e.to_string();
        assert!(msg.contains("preprocess") && msg.contains("manifest.json"), "{msg}");
        let e = Pipeline::new(&cfg, dir.path()).run_stage(Stage::Preprocess).unwrap_err();
        assert!(e.to_string().contains("corpus.json"), "{e}");
    }
}
