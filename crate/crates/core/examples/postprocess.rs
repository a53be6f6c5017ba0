//! Turns a reconstruction residual into an anomaly map and writes an overlay PNG.
//!
//! The "reconstruction" here is the same phantom case rendered without its lesion, which
//! is what a well-trained model should approximate.

use uad::dataset::extract_slices;
use uad::phantom::{make_phantom_corpus, LesionKind};
use uad::postprocess::{apply_pipeline, save_overlay_png, PostprocessConfig};

fn main() -> uad::Result<()> {
    let sick = make_phantom_corpus(1, 4, LesionKind::Disc)?.remove(0);
    let healthy = make_phantom_corpus(1, 4, LesionKind::None)?.remove(0);
    let x = extract_slices(&sick.volume, 96)?;
    let recon = extract_slices(&healthy.volume, 96)?;
    let cfg = PostprocessConfig::default();
    let out = std::env::temp_dir().join("uad-overlay.png");
    for z in 0..x.len() {
        let map = apply_pipeline(&x[z], &recon[z], &cfg)?;
        let gt = &sick.masks[0].labels()[z * 96 * 96..(z + 1) * 96 * 96];
        let (mut inside, mut outside) = ((0.0, 0), (0.0, 0));
        for (&v, &l) in map.values().iter().zip(gt) {
            let acc = if l == 4 { &mut inside } else { &mut outside };
            acc.0 += v as f64;
            acc.1 += 1;
        }
        if inside.1 > 0 {
            println!("slice {z}: mean score {:.4} on the lesion, {:.4} elsewhere", inside.0 / inside.1 as f64, outside.0 / outside.1 as f64);
        }
        if z == 4 {
            save_overlay_png(&x[z], &map, &out)?;
        }
    }
    println!("overlay written to {}", out.display());
    Ok(())
}
