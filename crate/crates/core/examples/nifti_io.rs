//! Writes a volume and mask to NIfTI and reads them back.

use uad::io::{load_mask, load_volume, read_description, save_mask, save_volume_described};
use uad::phantom::{make_phantom_corpus, phantom_label_names, LesionKind};

fn main() -> uad::Result<()> {
    let case = make_phantom_corpus(1, 6, LesionKind::Diffuse)?.remove(0);
    let dir = std::env::temp_dir().join("uad-nifti-example");
    std::fs::create_dir_all(&dir).map_err(|e| uad::UadError::io(&dir, e))?;
    let img = dir.join("image.nii.gz");
    let seg = dir.join("mask.nii.gz");
    save_volume_described(&case.volume, &img, "phantom example")?;
    save_mask(&case.masks[0], case.volume.spacing(), &seg)?;
    let v = load_volume(&img)?;
    let m = load_mask(&seg, &phantom_label_names(), "reference")?;
    println!("{} {:?} spacing {:?} '{}'", img.display(), v.shape(), v.spacing(), read_description(&img)?);
    println!("round trip exact: image {}, mask {}", v.voxels() == case.volume.voxels(), m.labels() == case.masks[0].labels());
    Ok(())
}
