//! Builds the residual VAE and pushes one slice through it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uad::dataset::extract_slices;
use uad::nn::Module;
use uad::phantom::{make_phantom_corpus, LesionKind};
use uad::resvae::{ResVae, ResVaeConfig};

fn main() -> uad::Result<()> {
    let cfg = ResVaeConfig::default();
    let model = ResVae::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("channels {:?}, latent {}, {} parameters", cfg.channels, cfg.latent_dim, model.num_params());
    let case = make_phantom_corpus(1, 0, LesionKind::None)?.remove(0);
    let s = &extract_slices(&case.volume, 96)?[3];
    let d = model.encode_slice(s)?;
    let recon = model.decode_latent(&d.mu)?;
    println!("latent |mu| {:.4}, recon {}x{}", d.mu.iter().map(|v| v * v).sum::<f64>().sqrt(), recon.width(), recon.height());
    Ok(())
}
