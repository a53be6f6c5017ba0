//! Synthetic pelvic "uterus" phantoms for desk-scale end-to-end runs.
//!
//! Each phantom is a 96×96×8 volume holding a bright bladder and an elliptical uterus
//! with banded interior (endometrium, junctional zone, myometrium). Lesioned phantoms
//! carry either a high-contrast `disc` or a low-contrast `diffuse` texture patch.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UadError};
use crate::volume::{AnnotatedCase, CaseMetadata, Cohort, SegmentationMask, UterineFlexion, UterineVersion, Volume};

pub const PHANTOM_SHAPE: [usize; 3] = [96, 96, 8];
pub const PHANTOM_SPACING: [f32; 3] = [0.5, 0.5, 1.0];

pub const LABEL_ENDOMETRIUM: u16 = 1;
pub const LABEL_JUNCTIONAL_ZONE: u16 = 2;
pub const LABEL_MYOMETRIUM: u16 = 3;
pub const LABEL_DISC: u16 = 4;
pub const LABEL_DIFFUSE: u16 = 5;
pub const LABEL_BLADDER: u16 = 6;

/// Exact lesion outlines.
pub const REFERENCE_ANNOTATOR: &str = "reference";
/// Lesion outlines dilated by two pixels (a superset of the reference).
pub const BROAD_ANNOTATOR: &str = "observer";

pub fn phantom_label_names() -> BTreeMap<u16, String> {
    [
        (LABEL_ENDOMETRIUM, "endometrium"),
        (LABEL_JUNCTIONAL_ZONE, "junctional_zone"),
        (LABEL_MYOMETRIUM, "myometrium"),
        (LABEL_DISC, "disc"),
        (LABEL_DIFFUSE, "diffuse"),
        (LABEL_BLADDER, "bladder"),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.to_string()))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionKind {
    None,
    Disc,
    Diffuse,
}

impl LesionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Disc => "disc",
            Self::Diffuse => "diffuse",
        }
    }
}

impl FromStr for LesionKind {
    type Err = UadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "disc" => Ok(Self::Disc),
            "diffuse" => Ok(Self::Diffuse),
            other => Err(UadError::invalid("lesion kind", format!("{other:?} is not one of none, disc, diffuse"))),
        }
    }
}

struct Geometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    /// Lateral drift of the centre per slice away from the middle slice.
    drift: f64,
    levels: [f64; 4],
}

impl Geometry {
    fn random(rng: &mut ChaCha8Rng, version: UterineVersion, flexion: UterineFlexion) -> Self {
        let tilt = rng.random_range(0.1..0.35);
        let bend = rng.random_range(0.4..1.0);
        Self {
            cx: 48.0 + rng.random_range(-3.0..3.0),
            cy: 52.0 + rng.random_range(-3.0..3.0),
            a: rng.random_range(26.0..31.0),
            b: rng.random_range(19.0..24.0),
            angle: if version == UterineVersion::Retroverted { -tilt } else { tilt },
            drift: if flexion == UterineFlexion::Retroflexed { -bend } else { bend },
            levels: [
                0.78 + rng.random_range(-0.03..0.03),
                0.28 + rng.random_range(-0.03..0.03),
                0.52 + rng.random_range(-0.03..0.03),
                0.12 + rng.random_range(-0.02..0.02),
            ],
        }
    }

    fn scale(&self, z: usize) -> f64 {
        let t = (z as f64 - 3.5) / 4.6;
        (1.0 - t * t).sqrt()
    }

    fn centre(&self, z: usize) -> (f64, f64) {
        (self.cx + self.drift * (z as f64 - 3.5), self.cy)
    }

    /// Normalised elliptical radius and polar angle of `(x, y)` on slice `z`.
    fn polar(&self, x: f64, y: f64, z: usize) -> (f64, f64) {
        let (cx, cy) = self.centre(z);
        let s = self.scale(z);
        let (dx, dy) = (x - cx, y - cy);
        let (c, si) = (self.angle.cos(), self.angle.sin());
        let u = (c * dx + si * dy) / (self.a * s);
        let v = (-si * dx + c * dy) / (self.b * s);
        ((u * u + v * v).sqrt(), v.atan2(u))
    }

    /// Pixel position at normalised radius `rho` and polar angle `phi` on slice `z`.
    fn point(&self, rho: f64, phi: f64, z: usize) -> (f64, f64) {
        let (cx, cy) = self.centre(z);
        let s = self.scale(z);
        let (u, v) = (rho * phi.cos() * self.a * s, rho * phi.sin() * self.b * s);
        let (c, si) = (self.angle.cos(), self.angle.sin());
        (cx + c * u - si * v, cy + si * u + c * v)
    }
}

fn smoothstep(edge: f64, width: f64, x: f64) -> f64 {
    let t = ((x - edge) / width + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

enum Lesion {
    None,
    Disc { slices: std::ops::RangeInclusive<usize>, centre: (f64, f64), radius: f64, mid: usize },
    Diffuse { phi0: f64, half_width: f64, phases: [f64; 3] },
}

impl Lesion {
    fn random(kind: LesionKind, g: &Geometry, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            LesionKind::None => Self::None,
            LesionKind::Disc => {
                let mid = rng.random_range(3..=4);
                let phi = rng.random_range(0.0..2.0 * PI);
                let centre = g.point(0.76, phi, mid);
                Self::Disc { slices: mid - 1..=mid + 1, centre, radius: rng.random_range(4.5..6.0), mid }
            }
            LesionKind::Diffuse => Self::Diffuse {
                phi0: rng.random_range(0.0..2.0 * PI),
                half_width: rng.random_range(0.35 * PI..0.5 * PI),
                phases: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
            },
        }
    }

    /// Intensity offset and the signed distance (px) to the reference outline, negative inside.
    fn at(&self, g: &Geometry, x: f64, y: f64, z: usize, base: f64) -> Option<(f64, f64)> {
        match self {
            Self::None => None,
            Self::Disc { slices, centre, radius, mid } => {
                if !slices.contains(&z) {
                    return None;
                }
                let r = radius * (1.0 - 0.2 * (z as f64 - *mid as f64).abs());
                let d = ((x - centre.0).powi(2) + (y - centre.1).powi(2)).sqrt() - r;
                (d < 3.0).then_some((if d < 0.0 { 0.95 - base } else { 0.0 }, d))
            }
            Self::Diffuse { phi0, half_width, phases } => {
                if !(1..=6).contains(&z) {
                    return None;
                }
                let (rho, phi) = g.polar(x, y, z);
                let dphi = (phi - phi0 + PI).rem_euclid(2.0 * PI) - PI;
                let scale = g.b * g.scale(z);
                let d_ang = (dphi.abs() - half_width) * rho * scale;
                let d_rad = ((rho - 0.62).abs() - 0.24) * scale;
                let d = d_ang.max(d_rad);
                let texture = 0.5 * (x / 2.3 + phases[0]).sin() * (y / 2.9 + phases[1]).cos() + 0.5 * ((x + y) / 3.7 + phases[2]).sin();
                (d < 3.0).then(|| (if d < 0.0 { -0.07 + 0.05 * texture } else { 0.0 }, d))
            }
        }
    }
}

fn make_case(index: usize, seed: u64, kind: LesionKind) -> Result<AnnotatedCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let version = if rng.random_bool(0.7) { UterineVersion::Anteverted } else { UterineVersion::Retroverted };
    let flexion = if rng.random_bool(0.7) { UterineFlexion::Anteflexed } else { UterineFlexion::Retroflexed };
    let g = Geometry::random(&mut rng, version, flexion);
    let lesion = Lesion::random(kind, &g, &mut rng);
    let bg_phase = rng.random_range(0.0..2.0 * PI);
    let bladder = (g.cx + rng.random_range(-4.0..4.0), g.cy - g.b - 13.0, rng.random_range(16.0..21.0), rng.random_range(8.0..11.0));
    let noise = Normal::new(0.0, 0.015).expect("valid sigma");

    let [nx, ny, nz] = PHANTOM_SHAPE;
    let mut voxels = Vec::with_capacity(nx * ny * nz);
    let mut reference = Vec::with_capacity(nx * ny * nz);
    let mut broad = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (xf, yf) = (x as f64, y as f64);
                let [endo, jz, myo, bg] = g.levels;
                let mut value = bg + 0.03 * (xf / 9.0 + bg_phase).sin() * (yf / 11.0).cos();
                let mut label = 0;
                let bl = ((xf - bladder.0) / bladder.2).powi(2) + ((yf - bladder.1) / bladder.3).powi(2);
                if bl < 1.0 {
                    label = LABEL_BLADDER;
                }
                value += (0.92 - value) * (1.0 - smoothstep(1.0, 0.15, bl));
                let (rho, _) = g.polar(xf, yf, z);
                let inside = 1.0 - smoothstep(1.0, 0.06, rho);
                if inside > 0.0 {
                    let t1 = smoothstep(0.32, 0.06, rho);
                    let t2 = smoothstep(0.52, 0.06, rho);
                    let uterus = endo * (1.0 - t1) + jz * (t1 - t2) + myo * t2;
                    value = value * (1.0 - inside) + uterus * inside;
                }
                if rho < 1.0 {
                    label = if rho < 0.32 {
                        LABEL_ENDOMETRIUM
                    } else if rho < 0.52 {
                        LABEL_JUNCTIONAL_ZONE
                    } else {
                        LABEL_MYOMETRIUM
                    };
                }
                let mut broad_label = label;
                if let Some((delta, d)) = lesion.at(&g, xf, yf, z, value) {
                    let id = if kind == LesionKind::Disc { LABEL_DISC } else { LABEL_DIFFUSE };
                    value += delta;
                    if d < 0.0 {
                        label = id;
                    }
                    if d < 2.0 {
                        broad_label = id;
                    }
                }
                voxels.push((value + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
                reference.push(label);
                broad.push(broad_label);
            }
        }
    }
    let id = format!("phantom-{}-{seed}-{index:03}", kind.as_str());
    let volume = Volume::new(id.clone(), PHANTOM_SHAPE, PHANTOM_SPACING, voxels)?;
    let names = phantom_label_names();
    let masks = vec![
        SegmentationMask::new(PHANTOM_SHAPE, reference, names.clone(), REFERENCE_ANNOTATOR)?,
        SegmentationMask::new(PHANTOM_SHAPE, broad, names, BROAD_ANNOTATOR)?,
    ];
    let metadata = CaseMetadata {
        patient_key: id,
        field_strength_tesla: Some(if rng.random_bool(0.5) { 1.5 } else { 3.0 }),
        uterine_version: version,
        uterine_flexion: flexion,
        cohort: if kind == LesionKind::None { Cohort::Healthy } else { Cohort::UnhealthyInhouse },
    };
    AnnotatedCase::new(volume, masks, metadata)
}

/// `n` phantoms of one lesion kind; identical for identical `(n, seed, lesion)`.
pub fn make_phantom_corpus(n: usize, seed: u64, lesion: LesionKind) -> Result<Vec<AnnotatedCase>> {
    if n == 0 {
        return Err(UadError::invalid("phantom corpus", "n must be >= 1"));
    }
    (0..n).map(|i| make_case(i, seed, lesion)).collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::preprocess::largest_connected_component;

    #[test]
    fn healthy_phantoms_have_no_pathology() {
        for c in make_phantom_corpus(3, 1, LesionKind::None).unwrap() {
            for m in &c.masks {
                let present = m.present_labels();
                assert!(!present.contains(&LABEL_DISC) && !present.contains(&LABEL_DIFFUSE));
                assert!(present.contains(&LABEL_MYOMETRIUM) && present.contains(&LABEL_ENDOMETRIUM));
            }
            assert!(c.volume.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn disc_is_one_component_per_affected_slice() {
        for c in make_phantom_corpus(6, 2, LesionKind::Disc).unwrap() {
            let m = c.mask_of(REFERENCE_ANNOTATOR).unwrap();
            let [nx, ny, nz] = m.shape();
            let mut affected = 0;
            for z in 0..nz {
                let labels: Vec<u16> = m.labels()[z * nx * ny..(z + 1) * nx * ny].to_vec();
                if !labels.contains(&LABEL_DISC) {
                    continue;
                }
                affected += 1;
                let slice = SegmentationMask::new([nx, ny, 1], labels, phantom_label_names(), "s").unwrap();
                assert_eq!(largest_connected_component(&slice, LABEL_DISC).unwrap().components, 1);
            }
            assert_eq!(affected, 3);
            // disc is bright against the myometrium
            let inside: Vec<f32> = m.labels().iter().zip(c.volume.voxels()).filter(|(l, _)| **l == LABEL_DISC).map(|(_, v)| *v).collect();
            assert!(inside.iter().sum::<f32>() / inside.len() as f32 > 0.85);
        }
    }

    #[test]
    fn broad_annotator_contains_reference() {
        for kind in [LesionKind::Disc, LesionKind::Diffuse] {
            for c in make_phantom_corpus(3, 3, kind).unwrap() {
                let ids = BTreeSet::from([LABEL_DISC, LABEL_DIFFUSE]);
                let r = c.mask_of(REFERENCE_ANNOTATOR).unwrap();
                let b = c.mask_of(BROAD_ANNOTATOR).unwrap();
                assert!(r.count_any(&ids) > 0);
                assert!(b.count_any(&ids) > r.count_any(&ids));
                for (x, y) in r.labels().iter().zip(b.labels()) {
                    if ids.contains(x) {
                        assert!(ids.contains(y));
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = make_phantom_corpus(2, 9, LesionKind::Diffuse).unwrap();
        let b = make_phantom_corpus(2, 9, LesionKind::Diffuse).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.volume, y.volume);
            assert_eq!(x.masks, y.masks);
            assert_eq!(x.metadata, y.metadata);
        }
        let c = make_phantom_corpus(2, 10, LesionKind::Diffuse).unwrap();
        assert_ne!(a[0].volume, c[0].volume);
        assert!(make_phantom_corpus(0, 1, LesionKind::None).is_err());
    }
}
