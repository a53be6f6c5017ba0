//! Runs the per-case preprocessing chain on a phantom and reports the crop.

use uad::phantom::{make_phantom_corpus, LesionKind};
use uad::preprocess::{preprocess_case, PreprocessConfig};

fn main() -> uad::Result<()> {
    let case = make_phantom_corpus(1, 3, LesionKind::Disc)?.remove(0);
    let cfg = PreprocessConfig { resize_shape: [96, 96, 8], ..PreprocessConfig::default() };
    let out = preprocess_case(&case.volume, &case.masks, &cfg)?;
    let (lo, hi) = out.volume.min_max();
    println!("input  {:?} spacing {:?}", case.volume.shape(), case.volume.spacing());
    println!("output {:?} intensities [{lo:.3}, {hi:.3}]", out.volume.shape());
    println!("bbox   {:?}", out.bbox);
    println!("truncated uterus voxels: {}", out.truncated_voxels);
    for n in &out.notes {
        println!("note: {n}");
    }
    Ok(())
}
