//! Training-set expansion with flips and CLAHE.

use uad::dataset::{clahe, expand_training_set, extract_slices, AugmentationPolicy};
use uad::phantom::{make_phantom_corpus, LesionKind};

fn contrast(p: &[f32]) -> f32 {
    let m = p.iter().sum::<f32>() / p.len() as f32;
    (p.iter().map(|v| (v - m).powi(2)).sum::<f32>() / p.len() as f32).sqrt()
}

fn main() -> uad::Result<()> {
    let case = make_phantom_corpus(1, 2, LesionKind::None)?.remove(0);
    let slices = extract_slices(&case.volume, 96)?;
    let policy = AugmentationPolicy::default();
    let expanded = expand_training_set(&slices, &policy, 42)?;
    println!("{} slices expanded to {}", slices.len(), expanded.len());
    let eq = clahe(&slices[4], policy.clahe_clip, policy.clahe_tiles, policy.clahe_bins);
    println!("contrast before CLAHE {:.4}, after {:.4}", contrast(slices[4].pixels()), contrast(eq.pixels()));
    Ok(())
}
