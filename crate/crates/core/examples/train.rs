//! A short ResVAE training run on phantom slices, printing one line per epoch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uad::dataset::extract_slices;
use uad::phantom::{make_phantom_corpus, LesionKind};
use uad::resvae::{ResVae, ResVaeConfig};
use uad::ssim::SsimConfig;
use uad::training::{train, ConvExtractor, LossContext, LossWeights, TrainConfig};

fn main() -> uad::Result<()> {
    let mut slices = Vec::new();
    for c in make_phantom_corpus(6, 9, LesionKind::None)? {
        slices.extend(extract_slices(&c.volume, 96)?);
    }
    let val = slices.split_off(40);
    let mut model = ResVae::<f32>::new(
        ResVaeConfig { channels: vec![8, 16, 32, 64], latent_dim: 64, ..ResVaeConfig::default() },
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let weights = LossWeights { anneal_epochs: 3, ..LossWeights::default() };
    let ssim = SsimConfig::default();
    let extractor = ConvExtractor::<f32>::random(8, 1);
    let ctx = LossContext { weights: &weights, ssim: &ssim, extractor: &extractor };
    let cfg = TrainConfig { epochs: 3, learning_rate: 1e-3, batch_size: 8, ..TrainConfig::default() };
    let out = train(&mut model, &slices, &val, &cfg, &ctx, 0, |r| {
        println!("epoch {} train {:.4} val {:.4} beta {:.2e}", r.epoch, r.train.total, r.val.total, r.beta);
        Ok(())
    })?;
    println!("best epoch {} (val {:.4})", out.best_epoch, out.best_val);
    Ok(())
}
