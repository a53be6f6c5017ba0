//! Resampling, resizing, intensity normalisation, connected-component filtering and
//! uterus-centred cropping.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UadError};
use crate::volume::{SegmentationMask, Volume};

/// Per-axis interpolation taps: `(i0, i1, w0, w1)` for each output index.
type Taps = Vec<(usize, usize, f32, f32)>;

fn linear_taps(n_out: usize, n_in: usize, src_of: impl Fn(usize) -> f64) -> Taps {
    (0..n_out)
        .map(|j| {
            let src = src_of(j).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let f = (src - i0 as f64) as f32;
            if f == 0.0 {
                (i0, i0, 1.0, 0.0)
            } else {
                (i0, i1, 1.0 - f, f)
            }
        })
        .collect()
}

fn nearest_taps(n_out: usize, n_in: usize, src_of: impl Fn(usize) -> f64) -> Vec<usize> {
    (0..n_out).map(|j| (src_of(j).round().max(0.0) as usize).min(n_in - 1)).collect()
}

/// Separable trilinear interpolation (x, then y, then z).
fn interpolate(data: &[f32], shape: [usize; 3], taps: [&Taps; 3]) -> Vec<f32> {
    let [nx, ny, nz] = shape;
    let (ox, oy, oz) = (taps[0].len(), taps[1].len(), taps[2].len());
    let mut a = vec![0f32; ox * ny * nz];
    for zy in 0..ny * nz {
        let src = &data[zy * nx..(zy + 1) * nx];
        for (j, &(i0, i1, w0, w1)) in taps[0].iter().enumerate() {
            a[zy * ox + j] = src[i0] * w0 + src[i1] * w1;
        }
    }
    let mut b = vec![0f32; ox * oy * nz];
    for z in 0..nz {
        for (j, &(i0, i1, w0, w1)) in taps[1].iter().enumerate() {
            for x in 0..ox {
                b[(z * oy + j) * ox + x] = a[(z * ny + i0) * ox + x] * w0 + a[(z * ny + i1) * ox + x] * w1;
            }
        }
    }
    let plane = ox * oy;
    let mut c = vec![0f32; plane * oz];
    for (j, &(i0, i1, w0, w1)) in taps[2].iter().enumerate() {
        for p in 0..plane {
            c[j * plane + p] = b[i0 * plane + p] * w0 + b[i1 * plane + p] * w1;
        }
    }
    c
}

fn pick_nearest(labels: &[u16], shape: [usize; 3], idx: [&[usize]; 3]) -> Vec<u16> {
    let [nx, ny, _] = shape;
    let mut out = Vec::with_capacity(idx[0].len() * idx[1].len() * idx[2].len());
    for &z in idx[2] {
        for &y in idx[1] {
            for &x in idx[0] {
                out.push(labels[x + nx * (y + ny * z)]);
            }
        }
    }
    out
}

fn validate_spacing(target: [f32; 3]) -> Result<()> {
    if target.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(UadError::invalid("target spacing", format!("{target:?} must be strictly positive")));
    }
    Ok(())
}

fn resampled_shape(shape: [usize; 3], spacing: [f32; 3], target: [f32; 3]) -> Result<[usize; 3]> {
    validate_spacing(target)?;
    let mut out = [0; 3];
    for a in 0..3 {
        let n = (shape[a] as f64 * spacing[a] as f64 / target[a] as f64).round();
        if n < 1.0 {
            return Err(UadError::invalid(
                "resampled shape",
                format!("axis {a} collapses to {n} voxels ({} x {} mm -> {} mm)", shape[a], spacing[a], target[a]),
            ));
        }
        out[a] = n as usize;
    }
    Ok(out)
}

/// Output voxel `j` sits at physical offset `j * target` from the first input voxel centre.
fn resample_src(spacing: f32, target: f32) -> impl Fn(usize) -> f64 {
    let r = target as f64 / spacing as f64;
    move |j| j as f64 * r
}

/// Half-pixel-centre mapping used when forcing a shape.
fn resize_src(n_in: usize, n_out: usize) -> impl Fn(usize) -> f64 {
    let r = n_in as f64 / n_out as f64;
    move |j| (j as f64 + 0.5) * r - 0.5
}

/// Trilinear resampling to a new voxel spacing.
pub fn resample(v: &Volume, target: [f32; 3]) -> Result<Volume> {
    let shape = v.shape();
    let out = resampled_shape(shape, v.spacing(), target)?;
    let taps: Vec<Taps> = (0..3).map(|a| linear_taps(out[a], shape[a], resample_src(v.spacing()[a], target[a]))).collect();
    Volume::new(v.id(), out, target, interpolate(v.voxels(), shape, [&taps[0], &taps[1], &taps[2]]))
}

/// Nearest-neighbour counterpart of [`resample`] for label masks.
pub fn resample_mask(m: &SegmentationMask, spacing: [f32; 3], target: [f32; 3]) -> Result<SegmentationMask> {
    let shape = m.shape();
    let out = resampled_shape(shape, spacing, target)?;
    let idx: Vec<Vec<usize>> = (0..3).map(|a| nearest_taps(out[a], shape[a], resample_src(spacing[a], target[a]))).collect();
    m.with_labels(out, pick_nearest(m.labels(), shape, [&idx[0], &idx[1], &idx[2]]))
}

fn validate_shape(shape: [usize; 3]) -> Result<()> {
    if shape.contains(&0) {
        return Err(UadError::invalid("resize shape", format!("{shape:?} has a zero axis")));
    }
    Ok(())
}

/// Trilinear resize to an exact grid; spacing scales by `old_shape / new_shape`.
pub fn resize_to(v: &Volume, shape: [usize; 3]) -> Result<Volume> {
    validate_shape(shape)?;
    let old = v.shape();
    if old == shape {
        return Ok(v.clone());
    }
    let taps: Vec<Taps> = (0..3).map(|a| linear_taps(shape[a], old[a], resize_src(old[a], shape[a]))).collect();
    let sp = v.spacing();
    let spacing = [0, 1, 2].map(|a| (sp[a] as f64 * old[a] as f64 / shape[a] as f64) as f32);
    Volume::new(v.id(), shape, spacing, interpolate(v.voxels(), old, [&taps[0], &taps[1], &taps[2]]))
}

pub fn resize_mask_to(m: &SegmentationMask, shape: [usize; 3]) -> Result<SegmentationMask> {
    validate_shape(shape)?;
    let old = m.shape();
    if old == shape {
        return Ok(m.clone());
    }
    let idx: Vec<Vec<usize>> = (0..3).map(|a| nearest_taps(shape[a], old[a], resize_src(old[a], shape[a]))).collect();
    m.with_labels(shape, pick_nearest(m.labels(), old, [&idx[0], &idx[1], &idx[2]]))
}

/// Min-max scaling to [0, 1]; a constant volume maps to zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let range = hi as f64 - lo as f64;
    let voxels = if range > 0.0 {
        v.voxels().iter().map(|&x| (((x as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; v.voxels().len()]
    };
    Volume::new(v.id(), v.shape(), v.spacing(), voxels).expect("normalised values are finite")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LccOutcome {
    pub mask: SegmentationMask,
    pub components: usize,
    pub kept_voxels: usize,
    pub removed_voxels: usize,
    /// The label is declared but has no voxels; the mask is returned unchanged.
    pub label_absent: bool,
}

/// Keeps only the largest 26-connected component of `label`.
///
/// Ties go to the component whose smallest `(x, y, z)` coordinate is lexicographically first.
pub fn largest_connected_component(m: &SegmentationMask, label: u16) -> Result<LccOutcome> {
    if !m.label_names().contains_key(&label) {
        return Err(UadError::invalid("connected-component label", format!("{label} is not in label_names")));
    }
    let [nx, ny, nz] = m.shape();
    let labels = m.labels();
    let mut comp = vec![u32::MAX; labels.len()];
    // (size, min coordinate) per component
    let mut stats: Vec<(usize, (usize, usize, usize))> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if labels[start] != label || comp[start] != u32::MAX {
            continue;
        }
        let id = stats.len() as u32;
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        let mut min_c = (usize::MAX, usize::MAX, usize::MAX);
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y, z) = crate::volume::unravel(i, [nx, ny, nz]);
            min_c = min_c.min((x, y, z));
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                            continue;
                        }
                        let j = qx as usize + nx * (qy as usize + ny * qz as usize);
                        if labels[j] == label && comp[j] == u32::MAX {
                            comp[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        stats.push((size, min_c));
    }
    if stats.is_empty() {
        return Ok(LccOutcome { mask: m.clone(), components: 0, kept_voxels: 0, removed_voxels: 0, label_absent: true });
    }
    let keep = (0..stats.len())
        .min_by(|&a, &b| stats[b].0.cmp(&stats[a].0).then(stats[a].1.cmp(&stats[b].1)))
        .expect("nonempty") as u32;
    let total: usize = stats.iter().map(|s| s.0).sum();
    let new_labels = labels
        .iter()
        .zip(&comp)
        .map(|(&l, &c)| if l == label && c != keep { 0 } else { l })
        .collect();
    Ok(LccOutcome {
        mask: m.with_labels(m.shape(), new_labels)?,
        components: stats.len(),
        kept_voxels: stats[keep as usize].0,
        removed_voxels: total - stats[keep as usize].0,
        label_absent: false,
    })
}

/// In-plane crop window plus the inclusive slice range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub z_lo: usize,
    pub z_hi: usize,
}

impl BoundingBox {
    pub fn full(shape: [usize; 3]) -> Self {
        Self { x0: 0, y0: 0, width: shape[0], height: shape[1], z_lo: 0, z_hi: shape[2] - 1 }
    }

    pub fn depth(&self) -> usize {
        self.z_hi - self.z_lo + 1
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height && z >= self.z_lo && z <= self.z_hi
    }

    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        let ok = self.width > 0
            && self.height > 0
            && self.z_lo <= self.z_hi
            && self.x0 + self.width <= shape[0]
            && self.y0 + self.height <= shape[1]
            && self.z_hi < shape[2];
        if ok {
            Ok(())
        } else {
            Err(UadError::invalid("bounding box", format!("{self:?} does not fit volume {shape:?}")))
        }
    }
}

/// Square in-plane box of side `crop` centred on the uterus centroid, clamped to the grid;
/// the slice range spans every slice holding uterus voxels.
pub fn compute_bbox(m: &SegmentationMask, uterus_labels: &BTreeSet<u16>, crop: usize) -> Result<BoundingBox> {
    let [nx, ny, nz] = m.shape();
    if crop == 0 || crop > nx || crop > ny {
        return Err(UadError::invalid("crop size", format!("{crop} does not fit in-plane extent {nx}x{ny}")));
    }
    let (mut sx, mut sy, mut count) = (0f64, 0f64, 0usize);
    let (mut z_lo, mut z_hi) = (usize::MAX, 0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if uterus_labels.contains(&m.get(x, y, z)) {
                    sx += x as f64;
                    sy += y as f64;
                    count += 1;
                    z_lo = z_lo.min(z);
                    z_hi = z_hi.max(z);
                }
            }
        }
    }
    if count == 0 {
        return Err(UadError::invalid("uterus mask", format!("no voxels with labels {uterus_labels:?}")));
    }
    let half = crop as f64 / 2.0;
    let corner = |c: f64, n: usize| -> usize { ((c - half).round().max(0.0) as usize).min(n - crop) };
    Ok(BoundingBox {
        x0: corner(sx / count as f64, nx),
        y0: corner(sy / count as f64, ny),
        width: crop,
        height: crop,
        z_lo,
        z_hi,
    })
}

/// Uterus voxels lying outside `b` (nonzero when the uterus exceeds the crop).
pub fn voxels_outside(m: &SegmentationMask, labels: &BTreeSet<u16>, b: &BoundingBox) -> usize {
    let [nx, ny, nz] = m.shape();
    let mut n = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if labels.contains(&m.get(x, y, z)) && !b.contains(x, y, z) {
                    n += 1;
                }
            }
        }
    }
    n
}

fn crop_grid<T: Copy>(data: &[T], shape: [usize; 3], b: &BoundingBox) -> Vec<T> {
    let mut out = Vec::with_capacity(b.width * b.height * b.depth());
    for z in b.z_lo..=b.z_hi {
        for y in b.y0..b.y0 + b.height {
            let row = (z * shape[1] + y) * shape[0];
            out.extend_from_slice(&data[row + b.x0..row + b.x0 + b.width]);
        }
    }
    out
}

pub fn crop_volume(v: &Volume, b: &BoundingBox) -> Result<Volume> {
    b.validate(v.shape())?;
    Volume::new(v.id(), [b.width, b.height, b.depth()], v.spacing(), crop_grid(v.voxels(), v.shape(), b))
}

pub fn crop_mask(m: &SegmentationMask, b: &BoundingBox) -> Result<SegmentationMask> {
    b.validate(m.shape())?;
    m.with_labels([b.width, b.height, b.depth()], crop_grid(m.labels(), m.shape(), b))
}

pub fn crop(v: &Volume, m: &SegmentationMask, b: &BoundingBox) -> Result<(Volume, SegmentationMask)> {
    m.check_pairs_with(v)?;
    Ok((crop_volume(v, b)?, crop_mask(m, b)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_spacing: [f32; 3],
    pub resize_shape: [usize; 3],
    pub crop_size: usize,
    /// Labels that make up the uterus (used for LCC filtering and the bounding box).
    pub uterus_labels: Vec<u16>,
    pub largest_component: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: [0.5, 0.5, 1.0],
            resize_shape: [256, 256, 30],
            crop_size: 96,
            uterus_labels: vec![1, 2, 3],
            largest_component: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        validate_spacing(self.target_spacing).map_err(|e| cfg_err("preprocess.target_spacing", e))?;
        validate_shape(self.resize_shape).map_err(|e| cfg_err("preprocess.resize_shape", e))?;
        if self.crop_size == 0 || self.crop_size > self.resize_shape[0] || self.crop_size > self.resize_shape[1] {
            return Err(UadError::Config {
                key: "preprocess.crop_size".into(),
                reason: format!("{} must be in 1..=min in-plane resize extent", self.crop_size),
            });
        }
        if self.uterus_labels.is_empty() || self.uterus_labels.contains(&0) {
            return Err(UadError::Config {
                key: "preprocess.uterus_labels".into(),
                reason: "must be a nonempty list of nonzero label ids".into(),
            });
        }
        Ok(())
    }

    pub fn uterus_set(&self) -> BTreeSet<u16> {
        self.uterus_labels.iter().copied().collect()
    }
}

fn cfg_err(key: &str, e: UadError) -> UadError {
    UadError::Config { key: key.into(), reason: e.to_string() }
}

/// Result of the full per-case chain.
#[derive(Debug, Clone)]
pub struct PreprocessedCase {
    pub volume: Volume,
    pub masks: Vec<SegmentationMask>,
    pub bbox: BoundingBox,
    /// Uterus voxels cut off because the uterus is wider than the crop.
    pub truncated_voxels: usize,
    pub notes: Vec<String>,
}

/// resample → resize → normalise → (LCC on the reference mask) → bbox → crop.
///
/// The first mask is the reference annotation that defines the uterus box; every mask
/// is resampled and cropped identically.
pub fn preprocess_case(volume: &Volume, masks: &[SegmentationMask], cfg: &PreprocessConfig) -> Result<PreprocessedCase> {
    cfg.validate()?;
    if masks.is_empty() {
        return Err(UadError::invalid("case", "at least one mask is required"));
    }
    for m in masks {
        m.check_pairs_with(volume)?;
    }
    let spacing = volume.spacing();
    let v = resample(volume, cfg.target_spacing)?;
    let v = resize_to(&v, cfg.resize_shape)?;
    let v = normalize_intensity(&v);
    let mut resampled = Vec::with_capacity(masks.len());
    for m in masks {
        let r = resample_mask(m, spacing, cfg.target_spacing)?;
        resampled.push(resize_mask_to(&r, cfg.resize_shape)?);
    }
    let uterus = cfg.uterus_set();
    let mut notes = Vec::new();
    let mut reference = resampled[0].clone();
    if cfg.largest_component {
        for &label in &cfg.uterus_labels {
            if !reference.label_names().contains_key(&label) {
                continue;
            }
            let out = largest_connected_component(&reference, label)?;
            if out.removed_voxels > 0 {
                notes.push(format!("label {label}: removed {} voxels in {} spurious components", out.removed_voxels, out.components - 1));
            }
            reference = out.mask;
        }
    }
    let bbox = compute_bbox(&reference, &uterus, cfg.crop_size)?;
    let truncated = voxels_outside(&reference, &uterus, &bbox);
    if truncated > 0 {
        notes.push(format!("uterus exceeds the {}px crop: {truncated} voxels truncated", cfg.crop_size));
    }
    resampled[0] = reference;
    let cropped_masks = resampled.iter().map(|m| crop_mask(m, &bbox)).collect::<Result<Vec<_>>>()?;
    Ok(PreprocessedCase { volume: crop_volume(&v, &bbox)?, masks: cropped_masks, bbox, truncated_voxels: truncated, notes })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;

    fn names() -> BTreeMap<u16, String> {
        BTreeMap::from([(1, "uterus".to_string()), (2, "myoma".to_string())])
    }

    fn mask_from(shape: [usize; 3], voxels: &[(usize, usize, usize, u16)]) -> SegmentationMask {
        let mut labels = vec![0u16; shape.iter().product()];
        for &(x, y, z, l) in voxels {
            labels[x + shape[0] * (y + shape[1] * z)] = l;
        }
        SegmentationMask::new(shape, labels, names(), "a").unwrap()
    }

    #[test]
    fn resample_shape_arithmetic() {
        let v = Volume::filled("v", [128, 128, 10], [1.0, 1.0, 3.0], 0.3).unwrap();
        let r = resample(&v, [0.5, 0.5, 1.0]).unwrap();
        assert_eq!(r.shape(), [256, 256, 30]);
        assert_eq!(r.spacing(), [0.5, 0.5, 1.0]);
        assert!(r.voxels().iter().all(|&x| (x - 0.3).abs() < 1e-6));
    }

    #[test]
    fn resample_identity_spacing_is_voxel_identical() {
        let v = Volume::from_fn("v", [5, 4, 3], [0.7, 0.7, 2.0], |x, y, z| (x * x + 3 * y + 7 * z) as f32).unwrap();
        let r = resample(&v, [0.7, 0.7, 2.0]).unwrap();
        assert_eq!(r.voxels(), v.voxels());
    }

    #[test]
    fn resample_degenerate_shape_errors() {
        let v = Volume::filled("v", [4, 4, 1], [1.0, 1.0, 1.0], 0.0).unwrap();
        assert!(resample(&v, [1.0, 1.0, 5.0]).is_err());
        assert!(resample(&v, [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn resample_twice_is_idempotent_on_ramps() {
        let v = Volume::from_fn("v", [9, 7, 5], [1.0, 1.5, 2.0], |x, y, z| 0.1 * x as f32 + 0.2 * y as f32 + 0.05 * z as f32).unwrap();
        let t = [0.5, 0.75, 1.0];
        let once = resample(&v, t).unwrap();
        let twice = resample(&once, t).unwrap();
        assert_eq!(once.shape(), twice.shape());
        for (a, b) in once.voxels().iter().zip(twice.voxels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_cases() {
        let v = Volume::from_fn("v", [256, 256, 30], [0.5, 0.5, 1.0], |x, _, _| x as f32).unwrap();
        assert_eq!(resize_to(&v, [256, 256, 30]).unwrap(), v);
        let big = Volume::filled("b", [512, 512, 60], [0.25, 0.3, 0.5], 0.8).unwrap();
        let r = resize_to(&big, [256, 256, 30]).unwrap();
        assert_eq!(r.shape(), [256, 256, 30]);
        assert!(r.voxels().iter().all(|&x| (x - 0.8).abs() < 1e-6));
        let expected = [0.25 * 512.0 / 256.0, 0.3 * 512.0 / 256.0, 0.5 * 60.0 / 30.0];
        for a in 0..3 {
            assert!((r.spacing()[a] as f64 - expected[a]).abs() < 1e-6);
        }
        assert!(resize_to(&v, [0, 2, 2]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let v = Volume::new("v", [3, 1, 1], [1.0; 3], vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(normalize_intensity(&v).voxels(), &[0.0, 0.5, 1.0]);
        let unit = Volume::new("u", [3, 1, 1], [1.0; 3], vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(normalize_intensity(&unit).voxels(), unit.voxels());
        let c = Volume::filled("c", [2, 2, 2], [1.0; 3], 3.3).unwrap();
        assert!(normalize_intensity(&c).voxels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lcc_keeps_largest() {
        let shape = [20, 20, 2];
        let mut vox = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                vox.push((x, y, 0, 1));
            }
        }
        for x in 15..20 {
            vox.push((x, 19, 1, 1));
        }
        vox.push((18, 2, 1, 2));
        let m = mask_from(shape, &vox);
        let out = largest_connected_component(&m, 1).unwrap();
        assert_eq!(out.kept_voxels, 100);
        assert_eq!(out.removed_voxels, 5);
        assert_eq!(out.mask.count(1), 100);
        assert_eq!(out.mask.count(2), 1);
    }

    #[test]
    fn lcc_single_component_and_diagonal_connectivity() {
        let m = mask_from([4, 4, 4], &[(0, 0, 0, 1), (1, 1, 1, 1), (2, 2, 2, 1)]);
        let out = largest_connected_component(&m, 1).unwrap();
        assert_eq!(out.mask, m);
        assert_eq!(out.components, 1);
    }

    #[test]
    fn lcc_tie_prefers_smallest_min_coordinate() {
        let m = mask_from([10, 10, 1], &[(7, 0, 0, 1), (8, 0, 0, 1), (2, 5, 0, 1), (2, 6, 0, 1)]);
        let out = largest_connected_component(&m, 1).unwrap();
        assert_eq!(out.mask.get(2, 5, 0), 1);
        assert_eq!(out.mask.get(7, 0, 0), 0);
    }

    #[test]
    fn lcc_absent_label_flags_and_unknown_label_errors() {
        let m = mask_from([3, 3, 1], &[(0, 0, 0, 1)]);
        let out = largest_connected_component(&m, 2).unwrap();
        assert!(out.label_absent);
        assert_eq!(out.mask, m);
        assert!(largest_connected_component(&m, 9).is_err());
    }

    #[test]
    fn bbox_single_voxel_centre() {
        let m = mask_from([256, 256, 30], &[(128, 128, 15, 1)]);
        let b = compute_bbox(&m, &BTreeSet::from([1]), 96).unwrap();
        assert_eq!((b.x0, b.y0, b.width, b.height, b.z_lo, b.z_hi), (80, 80, 96, 96, 15, 15));
    }

    #[test]
    fn bbox_z_range_and_clamping() {
        let vox: Vec<_> = (5..=20).map(|z| (250, 3, z, 1)).collect();
        let m = mask_from([256, 256, 30], &vox);
        let b = compute_bbox(&m, &BTreeSet::from([1]), 96).unwrap();
        assert_eq!((b.z_lo, b.z_hi), (5, 20));
        assert_eq!((b.x0, b.y0), (160, 0));
        b.validate(m.shape()).unwrap();
        let empty = mask_from([256, 256, 30], &[]);
        assert!(compute_bbox(&empty, &BTreeSet::from([1]), 96).is_err());
    }

    #[test]
    fn crop_coordinate_mapping() {
        let m = mask_from([256, 256, 30], &[(100, 90, 7, 2)]);
        let v = Volume::filled("v", [256, 256, 30], [0.5, 0.5, 1.0], 0.0).unwrap();
        let b = BoundingBox { x0: 80, y0: 80, width: 96, height: 96, z_lo: 5, z_hi: 12 };
        let (cv, cm) = crop(&v, &m, &b).unwrap();
        assert_eq!(cv.shape(), [96, 96, 8]);
        assert_eq!(cm.get(20, 10, 2), 2);
        assert_eq!(cm.count(2), 1);
    }

    #[test]
    fn full_box_crop_is_identity_and_recrop_is_idempotent() {
        let v = Volume::from_fn("v", [6, 5, 4], [1.0; 3], |x, y, z| (x + 2 * y + 3 * z) as f32).unwrap();
        let m = mask_from([6, 5, 4], &[(1, 1, 1, 1), (4, 3, 2, 2)]);
        let full = BoundingBox::full(v.shape());
        let (cv, cm) = crop(&v, &m, &full).unwrap();
        assert_eq!(cv, v);
        assert_eq!(cm, m);
        let b = BoundingBox { x0: 1, y0: 1, width: 4, height: 3, z_lo: 1, z_hi: 2 };
        let (once, _) = crop(&v, &m, &b).unwrap();
        let again = crop_volume(&once, &BoundingBox::full(once.shape())).unwrap();
        assert_eq!(once, again);
        let bad = BoundingBox { x0: 4, y0: 0, width: 4, height: 1, z_lo: 0, z_hi: 0 };
        assert!(crop(&v, &m, &bad).is_err());
    }

    #[test]
    fn full_chain_produces_crop_geometry() {
        let v = Volume::from_fn("v", [128, 128, 10], [1.0, 1.0, 3.0], |x, y, _| (x + y) as f32).unwrap();
        let mut vox = Vec::new();
        for z in 3..7 {
            for y in 50..70 {
                for x in 60..80 {
                    vox.push((x, y, z, 1));
                }
            }
        }
        vox.push((5, 5, 0, 1));
        let m = mask_from([128, 128, 10], &vox);
        let out = preprocess_case(&v, &[m], &PreprocessConfig::default()).unwrap();
        assert_eq!(out.volume.shape()[..2], [96, 96]);
        assert_eq!(out.masks[0].shape(), out.volume.shape());
        assert_eq!(out.truncated_voxels, 0);
        assert!(out.notes.iter().any(|n| n.contains("spurious")));
        let (lo, hi) = out.volume.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    proptest! {
        #[test]
        fn normalize_range_and_idempotence(vals in prop::collection::vec(-1e3f32..1e3, 1..64)) {
            let n = vals.len();
            let v = Volume::new("p", [n, 1, 1], [1.0; 3], vals).unwrap();
            let once = normalize_intensity(&v);
            prop_assert!(once.voxels().iter().all(|&x| (0.0..=1.0).contains(&x)));
            let twice = normalize_intensity(&once);
            for (a, b) in once.voxels().iter().zip(twice.voxels()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn lcc_never_grows_and_leaves_other_labels(labels in prop::collection::vec(0u16..3, 6 * 6 * 3)) {
            let m = SegmentationMask::new([6, 6, 3], labels, names(), "a").unwrap();
            let out = largest_connected_component(&m, 1).unwrap();
            prop_assert!(out.mask.count(1) <= m.count(1));
            for (a, b) in m.labels().iter().zip(out.mask.labels()) {
                if *a != 1 {
                    prop_assert_eq!(a, b);
                }
            }
        }

        #[test]
        fn crop_preserves_contained_uterus(xs in prop::collection::vec((0usize..8, 0usize..8, 0usize..4), 1..20)) {
            let vox: Vec<_> = xs.iter().map(|&(x, y, z)| (x + 10, y + 10, z + 2, 1)).collect();
            let m = mask_from([40, 40, 10], &vox);
            let uterus = BTreeSet::from([1]);
            let b = compute_bbox(&m, &uterus, 24).unwrap();
            prop_assert_eq!(voxels_outside(&m, &uterus, &b), 0);
            let cm = crop_mask(&m, &b).unwrap();
            prop_assert_eq!(cm.count(1), m.count(1));
        }
    }
}
