use std::path::Path;

use uad::config::RunConfig;

/// A run small enough to finish in seconds: few cases, a narrow model and one epoch.
pub const TINY: &str = r#"
seed = 3
[preprocess]
resize_shape = [96, 96, 8]
crop_size = 32
[model]
channels = [4, 8]
latent_dim = 8
input_size = 32
[augment]
copies_per_slice = 1
[synth]
samples = 2
[synth.ddpm]
train_steps = 2
validation_size = 2
[train]
epochs = 1
batch_size = 8
[loss]
anneal_epochs = 1
[perceptual]
width = 2
[bench]
n_slices = 4
warmup = 1
"#;

#[allow(dead_code)]
pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml_str(TINY, Path::new("tiny.toml")).expect("tiny config is valid")
}
