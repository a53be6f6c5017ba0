use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uad::config::{parse_config, RunConfig};
use uad::pipeline::{run_pipeline, write_phantom_corpus, Stage};
use uad::UadError;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "uad", version, about = "Unsupervised anomaly detection pipeline for volumetric MRI")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each stage writes its own subdirectory.
    #[arg(long, global = true, default_value = "uad-out")]
    out: PathBuf,
    /// Rerun stages even when their manifests are current.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Resample, normalise and crop the corpus listed in `paths.corpus`.
    Preprocess,
    /// Train the diffusion model on healthy training slices.
    SynthTrain,
    /// Draw synthetic slices from the trained diffusion model.
    SynthSample,
    /// Drop synthetic slices too similar to real ones.
    SynthFilter,
    /// Train the ResVAE.
    Train,
    /// Write anomaly heatmaps for the evaluation cases.
    Infer,
    /// Score heatmaps against ground-truth masks.
    Evaluate,
    /// Measure single-slice reconstruction latency.
    Bench,
    /// Generate a phantom corpus under `<out>/phantom`.
    Phantom {
        #[arg(long, default_value_t = 64)]
        healthy: usize,
        #[arg(long, default_value_t = 16)]
        lesioned: usize,
    },
    /// Run several stages in order (comma-separated; `synth` and `all` expand).
    Run {
        #[arg(long, default_value = "all")]
        stages: String,
    },
}

fn load(common: &Common) -> Result<RunConfig, UadError> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), UadError> {
    let cfg = load(&cli.common)?;
    let out = &cli.common.out;
    let stages = match cli.command {
        Command::Phantom { healthy, lesioned } => {
            let path = write_phantom_corpus(&out.join("phantom"), healthy, lesioned, cfg.seed)?;
            println!("phantom corpus: {}", path.display());
            return Ok(());
        }
        Command::Run { stages } => Stage::parse_list(&stages)?,
        Command::Preprocess => [Stage::Preprocess].into(),
        Command::SynthTrain => [Stage::SynthTrain].into(),
        Command::SynthSample => [Stage::SynthSample].into(),
        Command::SynthFilter => [Stage::SynthFilter].into(),
        Command::Train => [Stage::Train].into(),
        Command::Infer => [Stage::Infer].into(),
        Command::Evaluate => [Stage::Evaluate].into(),
        Command::Bench => [Stage::Bench].into(),
    };
    for r in run_pipeline(&cfg, out, &stages, cli.common.force)? {
        println!("{:<13} {}{}", r.stage.name(), if r.skipped { "skipped: " } else { "" }, r.summary);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
