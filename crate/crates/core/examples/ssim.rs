//! SSIM between a slice and a few perturbed copies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uad::dataset::{extract_slices, hflip};
use uad::phantom::{make_phantom_corpus, LesionKind};
use uad::ssim::{ssim, SsimConfig};
use uad::volume::Slice2D;

fn main() -> uad::Result<()> {
    let case = make_phantom_corpus(1, 1, LesionKind::None)?.remove(0);
    let slices = extract_slices(&case.volume, 96)?;
    let a = &slices[4];
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noisy = Slice2D::from_clamped(
        96,
        96,
        a.pixels().iter().map(|&p| p + 0.05 * (rng.random::<f32>() - 0.5)).collect(),
        a.source().clone(),
    )?;
    println!("identical        {:.4}", ssim(a, a, &cfg)?);
    println!("neighbour slice  {:.4}", ssim(a, &slices[5], &cfg)?);
    println!("light noise      {:.4}", ssim(a, &noisy, &cfg)?);
    println!("mirrored         {:.4}", ssim(a, &hflip(a), &cfg)?);
    Ok(())
}
