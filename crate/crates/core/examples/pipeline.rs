//! Every stage end to end on a handful of phantoms with a deliberately tiny model.
//! Run it twice with the same output directory to see the stages skip.

use std::path::PathBuf;

use uad::config::RunConfig;
use uad::pipeline::{run_pipeline, write_phantom_corpus, Stage};

const CONFIG: &str = r#"
[preprocess]
resize_shape = [96, 96, 8]
[model]
channels = [8, 16, 32, 64]
latent_dim = 32
[synth]
samples = 4
[synth.ddpm]
train_steps = 20
[train]
epochs = 2
learning_rate = 1e-3
[perceptual]
width = 4
[bench]
n_slices = 10
warmup = 2
"#;

fn main() -> uad::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("uad-pipeline-example"));
    let cfg = RunConfig::from_toml_str(CONFIG, "example.toml".as_ref())?;
    if !out.join("phantom/corpus.json").is_file() {
        write_phantom_corpus(&out.join("phantom"), 8, 4, cfg.seed)?;
    }
    for r in run_pipeline(&cfg, &out, &Stage::ALL.into_iter().collect(), false)? {
        println!("{:<13} {}", r.stage.name(), if r.skipped { "skipped" } else { &r.summary });
    }
    println!("outputs under {}", out.display());
    Ok(())
}
