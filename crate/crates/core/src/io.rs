//! NIfTI-1 volume and mask I/O plus JSON sidecars.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayD};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use nifti::writer::WriterOptions;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, UadError};
use crate::volume::{CaseMetadata, SegmentationMask, Volume};

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> UadError {
    UadError::Nifti { path: path.to_path_buf(), message: e.to_string() }
}

/// Reads the header and payload as `f32`, with its 3D shape and spacing.
fn read_nifti(path: &Path) -> Result<([usize; 3], [f32; 3], Vec<f32>)> {
    if !path.exists() {
        return Err(UadError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    let dims: Vec<usize> = header.dim[1..=ndim.min(7)].iter().map(|&d| d as usize).collect();
    // Trailing singleton axes (e.g. a 4th time axis of length 1) are accepted.
    let significant = dims.iter().rposition(|&d| d > 1).map_or(0, |i| i + 1);
    if ndim < 3 && significant > ndim || significant > 3 || ndim == 0 {
        return Err(UadError::NotVolumetric { path: path.to_path_buf(), dims });
    }
    let shape = [
        dims.first().copied().unwrap_or(1),
        dims.get(1).copied().unwrap_or(1),
        dims.get(2).copied().unwrap_or(1),
    ];
    let spacing = [header.pixdim[1], header.pixdim[2], header.pixdim[3]];
    let arr: ArrayD<f32> = obj.into_volume().into_ndarray::<f32>().map_err(|e| nifti_err(path, e))?;
    // Reversing the axes gives a z-major walk with x fastest, which is our layout.
    let out: Vec<f32> = arr.t().iter().copied().collect();
    if out.len() != shape.iter().product::<usize>() {
        return Err(UadError::NotVolumetric { path: path.to_path_buf(), dims: arr.shape().to_vec() });
    }
    Ok((shape, spacing, out))
}

fn header_for(spacing: [f32; 3], description: &str) -> NiftiHeader {
    let mut header = NiftiHeader::default();
    header.pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    header.xyzt_units = 2; // millimetres
    let mut descrip: Vec<u8> = description.bytes().take(79).collect();
    descrip.resize(80, 0);
    header.descrip = descrip;
    header
}

fn write_nifti<A>(path: &Path, header: &NiftiHeader, arr: &Array3<A>) -> Result<()>
where
    A: nifti::DataElement + bytemuck::Pod,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| UadError::io(parent, e))?;
    }
    WriterOptions::new(path)
        .reference_header(header)
        .write_nifti(arr)
        .map_err(|e| match e {
            nifti::NiftiError::Io(io) => UadError::io(path, io),
            other => nifti_err(path, other),
        })
}

/// Loads a volume, keeping the header spacing and intensities as stored.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (shape, spacing, voxels) = read_nifti(path)?;
    let id = volume_id_from_path(path);
    Volume::new(id, shape, spacing, voxels).map_err(|e| match e {
        UadError::NonFiniteVoxel { x, y, z, .. } => {
            UadError::NonFiniteVoxel { context: path.display().to_string(), x, y, z }
        }
        other => other,
    })
}

pub fn volume_id_from_path(path: &Path) -> String {
    let name = path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    save_volume_described(v, path, "")
}

/// Like [`save_volume`], writing `description` (≤ 79 bytes) into the header.
pub fn save_volume_described(v: &Volume, path: impl AsRef<Path>, description: &str) -> Result<()> {
    let path = path.as_ref();
    let [nx, ny, nz] = v.shape();
    let arr = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| v.get(x, y, z));
    write_nifti(path, &header_for(v.spacing(), description), &arr)
}

/// Reads the header description string of a NIfTI file.
pub fn read_description(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let d = &obj.header().descrip;
    let end = d.iter().position(|&b| b == 0).unwrap_or(d.len());
    Ok(String::from_utf8_lossy(&d[..end]).to_string())
}

/// Loads an integer label mask and validates ids against `label_names`.
pub fn load_mask(
    path: impl AsRef<Path>,
    label_names: &BTreeMap<u16, String>,
    annotator: &str,
) -> Result<SegmentationMask> {
    let path = path.as_ref();
    let (shape, _, values) = read_nifti(path)?;
    let mut labels = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u16::MAX as f32) {
            let (x, y, z) = crate::volume::unravel(i, shape);
            return Err(UadError::invalid(
                format!("mask {}", path.display()),
                format!("voxel ({x}, {y}, {z}) holds {v}, not a nonnegative integer label"),
            ));
        }
        labels.push(v as u16);
    }
    SegmentationMask::new(shape, labels, label_names.clone(), annotator).map_err(|e| match e {
        UadError::UnknownLabels { ids, .. } => UadError::UnknownLabels { context: path.display().to_string(), ids },
        other => other,
    })
}

pub fn save_mask(m: &SegmentationMask, spacing: [f32; 3], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [nx, ny, nz] = m.shape();
    let arr = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| m.get(x, y, z));
    write_nifti(path, &header_for(spacing, &format!("mask annotator={}", m.annotator())), &arr)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| UadError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| UadError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).expect("serialisable value");
    write_text(path, &(text + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| UadError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| UadError::io(path, e))
}

pub fn load_metadata(path: impl AsRef<Path>) -> Result<CaseMetadata> {
    let meta: CaseMetadata = read_json(path)?;
    meta.validate()?;
    Ok(meta)
}

pub fn save_metadata(meta: &CaseMetadata, path: impl AsRef<Path>) -> Result<()> {
    write_json(meta, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii");
        let v = Volume::from_fn("vol", [4, 4, 2], [1.0, 1.0, 3.0], |x, y, z| (x * 3 + y * 5 + z * 7) as f32 * 0.25).unwrap();
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.shape(), [4, 4, 2]);
        assert_eq!(back.spacing(), [1.0, 1.0, 3.0]);
        assert_eq!(back.voxels(), v.voxels());
    }

    #[test]
    fn gz_round_trip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii.gz");
        let a = Volume::filled("a", [3, 2, 2], [0.5, 0.5, 1.0], 1.0).unwrap();
        let b = Volume::filled("b", [2, 2, 1], [2.0, 2.0, 2.0], 7.5).unwrap();
        save_volume(&a, &path).unwrap();
        save_volume(&b, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.shape(), [2, 2, 1]);
        assert!(back.voxels().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn nan_voxel_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.nii");
        let arr = Array3::from_shape_fn((2, 2, 2), |(x, y, z)| if (x, y, z) == (1, 0, 1) { f32::NAN } else { 0.0 });
        write_nifti(&path, &header_for([1.0; 3], ""), &arr).unwrap();
        match load_volume(&path).unwrap_err() {
            UadError::NonFiniteVoxel { x: 1, y: 0, z: 1, .. } => {}
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_volumetric_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("4d.nii");
        let arr = ndarray::Array4::<f32>::zeros((2, 2, 2, 3));
        WriterOptions::new(&path).write_nifti(&arr).unwrap();
        assert!(matches!(load_volume(&path).unwrap_err(), UadError::NotVolumetric { .. }));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let v = Volume::filled("v", [1, 1, 1], [1.0; 3], 0.0).unwrap();
        let err = save_volume(&v, blocker.join("sub").join("v.nii")).unwrap_err();
        assert!(matches!(err, UadError::Io { .. }), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_volume("/nonexistent/x.nii").unwrap_err(), UadError::Io { .. }));
    }

    #[test]
    fn mask_labels_and_annotators() {
        let dir = tempfile::tempdir().unwrap();
        let names = BTreeMap::from([(1, "uterus".to_string()), (4, "myoma".to_string())]);
        let m = SegmentationMask::new([2, 2, 1], vec![0, 1, 4, 1], names.clone(), "expert1").unwrap();
        let p1 = dir.path().join("m1.nii.gz");
        let p2 = dir.path().join("m2.nii.gz");
        save_mask(&m, [1.0; 3], &p1).unwrap();
        save_mask(&m, [1.0; 3], &p2).unwrap();
        let a = load_mask(&p1, &names, "expert1").unwrap();
        let b = load_mask(&p2, &names, "novice").unwrap();
        assert_eq!(a.labels(), m.labels());
        assert_ne!(a.annotator(), b.annotator());

        let zeros = SegmentationMask::empty([2, 2, 1], names.clone(), "x").unwrap();
        save_mask(&zeros, [1.0; 3], &p1).unwrap();
        assert_eq!(load_mask(&p1, &names, "x").unwrap().present_labels().len(), 0);

        let bad = SegmentationMask::new([1, 1, 1], vec![7], BTreeMap::from([(7, "x".to_string())]), "x").unwrap();
        save_mask(&bad, [1.0; 3], &p2).unwrap();
        match load_mask(&p2, &names, "x").unwrap_err() {
            UadError::UnknownLabels { ids, .. } => assert_eq!(ids, vec![7]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn description_is_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nii");
        let v = Volume::filled("v", [1, 1, 1], [1.0; 3], 0.0).unwrap();
        save_volume_described(&v, &path, "cfg=abc ckpt=def").unwrap();
        assert_eq!(read_description(&path).unwrap(), "cfg=abc ckpt=def");
    }
}
