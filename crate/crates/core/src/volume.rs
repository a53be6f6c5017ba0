//! Containers for volumes, label masks, slices and per-case metadata.
//!
//! Voxel storage is x-fastest (`x + nx * (y + ny * z)`), so every axial slice `z`
//! is one contiguous `nx * ny` block with rows along `y`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UadError};
use crate::nn::Tensor;

/// 3D intensity grid with physical spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    id: String,
    shape: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, shape: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if shape.contains(&0) {
            return Err(UadError::invalid("volume shape", format!("{shape:?} has a zero axis")));
        }
        if let Some(s) = spacing.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(UadError::invalid("voxel spacing", format!("{spacing:?} has non-positive component {s}")));
        }
        let expected = shape.iter().product::<usize>();
        if voxels.len() != expected {
            return Err(UadError::shape(format!("volume {id}"), &[expected], &[voxels.len()]));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            let (x, y, z) = unravel(i, shape);
            return Err(UadError::NonFiniteVoxel { context: format!("volume {id}"), x, y, z });
        }
        Ok(Self { id, shape, spacing, voxels })
    }

    /// Constant-valued volume, handy for tests and padding.
    pub fn filled(id: impl Into<String>, shape: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        Self::new(id, shape, spacing, vec![value; shape.iter().product()])
    }

    /// Builds a volume from a function of voxel coordinates.
    pub fn from_fn(
        id: impl Into<String>,
        shape: [usize; 3],
        spacing: [f32; 3],
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(id, shape, spacing, voxels)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Row-major (`y` rows, `x` columns) axial slice.
    pub fn slice_z(&self, z: usize) -> &[f32] {
        let n = self.shape[0] * self.shape[1];
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub(crate) fn unravel(i: usize, shape: [usize; 3]) -> (usize, usize, usize) {
    let x = i % shape[0];
    let y = (i / shape[0]) % shape[1];
    let z = i / (shape[0] * shape[1]);
    (x, y, z)
}

/// Integer label grid from one annotator. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    shape: [usize; 3],
    labels: Vec<u16>,
    label_names: BTreeMap<u16, String>,
    annotator: String,
}

impl SegmentationMask {
    pub fn new(
        shape: [usize; 3],
        labels: Vec<u16>,
        label_names: BTreeMap<u16, String>,
        annotator: impl Into<String>,
    ) -> Result<Self> {
        let annotator = annotator.into();
        let expected = shape.iter().product::<usize>();
        if labels.len() != expected {
            return Err(UadError::shape(format!("mask of {annotator}"), &[expected], &[labels.len()]));
        }
        if label_names.contains_key(&0) {
            return Err(UadError::invalid("label_names", "id 0 is reserved for background"));
        }
        let present: BTreeSet<u16> = labels.iter().copied().filter(|&l| l != 0).collect();
        let unknown: Vec<u16> = present.into_iter().filter(|l| !label_names.contains_key(l)).collect();
        if !unknown.is_empty() {
            return Err(UadError::UnknownLabels { context: format!("of annotator {annotator}"), ids: unknown });
        }
        Ok(Self { shape, labels, label_names, annotator })
    }

    pub fn empty(shape: [usize; 3], label_names: BTreeMap<u16, String>, annotator: impl Into<String>) -> Result<Self> {
        Self::new(shape, vec![0; shape.iter().product()], label_names, annotator)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label_names(&self) -> &BTreeMap<u16, String> {
        &self.label_names
    }

    pub fn annotator(&self) -> &str {
        &self.annotator
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.index(x, y, z)]
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn count_any(&self, labels: &BTreeSet<u16>) -> usize {
        self.labels.iter().filter(|l| labels.contains(l)).count()
    }

    /// Ids actually present in the grid (excluding background).
    pub fn present_labels(&self) -> BTreeSet<u16> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }

    /// Replaces the label grid, re-validating against the existing names.
    pub fn with_labels(&self, shape: [usize; 3], labels: Vec<u16>) -> Result<Self> {
        Self::new(shape, labels, self.label_names.clone(), self.annotator.clone())
    }

    /// Rejects pairing with a volume of a different shape.
    pub fn check_pairs_with(&self, volume: &Volume) -> Result<()> {
        if self.shape != volume.shape() {
            return Err(UadError::shape(
                format!("mask of {} paired with volume {}", self.annotator, volume.id()),
                &volume.shape(),
                &self.shape,
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UterineVersion {
    Anteverted,
    Retroverted,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UterineFlexion {
    Anteflexed,
    Retroflexed,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Healthy,
    UnhealthyUmd,
    UnhealthyInhouse,
    Synthetic,
}

impl Cohort {
    pub fn is_unhealthy(self) -> bool {
        matches!(self, Self::UnhealthyUmd | Self::UnhealthyInhouse)
    }
}

/// Sidecar metadata; the serialised keys are the on-disk contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseMetadata {
    pub patient_key: String,
    /// `None` when the field strength is unknown.
    pub field_strength_tesla: Option<f64>,
    pub uterine_version: UterineVersion,
    pub uterine_flexion: UterineFlexion,
    pub cohort: Cohort,
}

impl CaseMetadata {
    pub fn validate(&self) -> Result<()> {
        if self.patient_key.trim().is_empty() {
            return Err(UadError::invalid("patient_key", "must be nonempty"));
        }
        if let Some(t) = self.field_strength_tesla {
            if !(t.is_finite() && t > 0.0) {
                return Err(UadError::invalid("field_strength_tesla", format!("{t} is not positive")));
            }
        }
        Ok(())
    }
}

/// Volume, its masks (one per annotator) and metadata.
#[derive(Debug, Clone)]
pub struct AnnotatedCase {
    pub volume: Volume,
    pub masks: Vec<SegmentationMask>,
    pub metadata: CaseMetadata,
}

impl AnnotatedCase {
    pub fn new(volume: Volume, masks: Vec<SegmentationMask>, metadata: CaseMetadata) -> Result<Self> {
        metadata.validate()?;
        for m in &masks {
            m.check_pairs_with(&volume)?;
        }
        Ok(Self { volume, masks, metadata })
    }

    pub fn patient_key(&self) -> &str {
        &self.metadata.patient_key
    }

    pub fn mask_of(&self, annotator: &str) -> Option<&SegmentationMask> {
        self.masks.iter().find(|m| m.annotator() == annotator)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceSource {
    pub case_id: String,
    pub index: usize,
}

/// Normalised 2D slice (`height` rows of `width` pixels, values in [0, 1]).
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    source: SliceSource,
}

impl Slice2D {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, source: SliceSource) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(UadError::shape("slice", &[height, width], &[pixels.len()]));
        }
        if let Some(v) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(UadError::invalid("slice pixels", format!("value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels, source })
    }

    /// Clamps into [0, 1] (NaN becomes 0) instead of rejecting.
    pub fn from_clamped(width: usize, height: usize, pixels: Vec<f32>, source: SliceSource) -> Result<Self> {
        let pixels = pixels.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(width, height, pixels, source)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn source(&self) -> &SliceSource {
        &self.source
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn with_source(mut self, source: SliceSource) -> Self {
        self.source = source;
        self
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }
}

/// Stacks equally sized slices into an `[n, 1, h, w]` tensor.
pub fn slices_to_tensor<'a>(slices: impl IntoIterator<Item = &'a Slice2D>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for s in slices {
        let d = (s.height, s.width);
        if *dims.get_or_insert(d) != d {
            let (h, w) = dims.expect("set");
            return Err(UadError::shape("slice batch", &[h, w], &[d.0, d.1]));
        }
        data.extend_from_slice(&s.pixels);
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| UadError::invalid("slice batch", "no slices"))?;
    Ok(Tensor::from_vec([n, 1, h, w], data))
}

/// Inverse of [`slices_to_tensor`] for one sample; values are clamped into [0, 1].
pub fn slice_from_tensor(t: &Tensor<f32>, i: usize, source: SliceSource) -> Result<Slice2D> {
    if t.c() != 1 {
        return Err(UadError::shape("slice tensor channels", &[1], &[t.c()]));
    }
    Slice2D::from_clamped(t.w(), t.h(), t.sample(i).to_vec(), source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> BTreeMap<u16, String> {
        BTreeMap::from([(1, "uterus".to_string()), (4, "myoma".to_string())])
    }

    #[test]
    fn volume_rejects_bad_spacing_and_nan() {
        assert!(Volume::new("v", [2, 1, 1], [1.0, 0.0, 1.0], vec![0.0; 2]).is_err());
        let err = Volume::new("v", [2, 1, 1], [1.0, 1.0, 1.0], vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, UadError::NonFiniteVoxel { x: 1, y: 0, z: 0, .. }));
        assert!(Volume::new("v", [2, 2, 1], [1.0; 3], vec![0.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_x_fastest() {
        let v = Volume::from_fn("v", [3, 2, 2], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        assert_eq!(v.get(2, 1, 1), 112.0);
        assert_eq!(v.slice_z(1)[1 + 3], 111.0);
        assert_eq!(v.slice_z(1)[2], 102.0);
    }

    #[test]
    fn mask_validation() {
        let ok = SegmentationMask::new([2, 2, 1], vec![0, 1, 4, 0], names(), "a").unwrap();
        assert_eq!(ok.present_labels(), BTreeSet::from([1, 4]));
        let err = SegmentationMask::new([2, 2, 1], vec![0, 7, 9, 7], names(), "a").unwrap_err();
        match err {
            UadError::UnknownLabels { ids, .. } => assert_eq!(ids, vec![7, 9]),
            other => panic!("unexpected {other}"),
        }
        let mut bad = names();
        bad.insert(0, "bg".into());
        assert!(SegmentationMask::new([1, 1, 1], vec![0], bad, "a").is_err());
    }

    #[test]
    fn mismatched_pairing_is_rejected() {
        let v = Volume::filled("v", [2, 2, 2], [1.0; 3], 0.0).unwrap();
        let m = SegmentationMask::empty([2, 2, 1], names(), "a").unwrap();
        let meta = CaseMetadata {
            patient_key: "p".into(),
            field_strength_tesla: Some(1.5),
            uterine_version: UterineVersion::Anteverted,
            uterine_flexion: UterineFlexion::Anteflexed,
            cohort: Cohort::Healthy,
        };
        assert!(AnnotatedCase::new(v, vec![m], meta).is_err());
    }

    #[test]
    fn metadata_keys_are_exact() {
        let meta = CaseMetadata {
            patient_key: "p1".into(),
            field_strength_tesla: None,
            uterine_version: UterineVersion::Retroverted,
            uterine_flexion: UterineFlexion::Unknown,
            cohort: Cohort::UnhealthyInhouse,
        };
        let json = serde_json::to_value(&meta).unwrap();
        let keys: BTreeSet<&str> = json.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        assert_eq!(
            keys,
            BTreeSet::from(["patient_key", "field_strength_tesla", "uterine_version", "uterine_flexion", "cohort"])
        );
        assert_eq!(json["cohort"], "unhealthy_inhouse");
        assert_eq!(json["uterine_version"], "retroverted");
        let empty_key = CaseMetadata { patient_key: " ".into(), ..meta };
        assert!(empty_key.validate().is_err());
    }

    #[test]
    fn slice_range_is_enforced() {
        let src = SliceSource { case_id: "c".into(), index: 0 };
        assert!(Slice2D::new(2, 1, vec![0.0, 1.01], src.clone()).is_err());
        let s = Slice2D::from_clamped(2, 1, vec![-0.2, 1.5], src).unwrap();
        assert_eq!(s.pixels(), &[0.0, 1.0]);
    }
}
