//! Pixel-level ROC analysis and lesion volumetry on a phantom with an oracle-ish heatmap.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uad::evaluate::{evaluate_pooled, lesion_volume, metrics_csv, score_voxels};
use uad::phantom::{make_phantom_corpus, LesionKind};

fn main() -> uad::Result<()> {
    let case = make_phantom_corpus(1, 8, LesionKind::Disc)?.remove(0);
    let gt = case.mask_of("reference").expect("reference mask");
    let disc: BTreeSet<u16> = [4].into();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // lesion voxels score higher on average, with plenty of overlap
    let heat: Vec<f32> =
        gt.labels().iter().map(|l| rng.random::<f32>() * 0.6 + if disc.contains(l) { 0.3 } else { 0.0 }).collect();
    let v = score_voxels(&heat, gt, &disc)?;
    let (row, curve) = evaluate_pooled("disc", 1, &v)?;
    print!("{}", metrics_csv(&[row], "example"));
    println!("{} ROC points, AUC {:.4}", curve.points.len(), curve.auc);
    println!("lesion volume {:.3} mL", lesion_volume(gt, 4, case.volume.spacing()));
    Ok(())
}
