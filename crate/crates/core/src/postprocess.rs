//! Residual maps to anomaly heatmaps: percentile threshold, radial weighting, squaring
//! and median smoothing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UadError};
use crate::volume::{Slice2D, Volume};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapProvenance {
    pub case_id: String,
    pub slice_index: usize,
    pub checkpoint_id: String,
    pub config_hash: String,
}

/// Nonnegative per-pixel anomaly scores, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    pub provenance: MapProvenance,
}

impl AnomalyMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(UadError::shape("anomaly map", &[height, width], &[values.len()]));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(UadError::invalid("anomaly map", format!("value {v} is negative or non-finite")));
        }
        Ok(Self { width, height, values, provenance: MapProvenance::default() })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn with_provenance(mut self, p: MapProvenance) -> Self {
        self.provenance = p;
        self
    }

    fn with_values(&self, values: Vec<f32>) -> Self {
        Self { width: self.width, height: self.height, values, provenance: self.provenance.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub percentile: f64,
    pub radius_px: f64,
    pub median_kernel: usize,
    /// Mask centre `(cx, cy)` in pixels; the geometric slice centre when absent.
    pub center: Option<[f64; 2]>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { percentile: 20.0, radius_px: 30.0, median_kernel: 5, center: None }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(UadError::invalid("postprocess.percentile", format!("{} outside [0, 100]", self.percentile)));
        }
        if !(self.radius_px.is_finite() && self.radius_px > 0.0) {
            return Err(UadError::invalid("postprocess.radius_px", format!("{} must be > 0", self.radius_px)));
        }
        if self.median_kernel == 0 || self.median_kernel.is_multiple_of(2) {
            return Err(UadError::invalid("postprocess.median_kernel", format!("{} must be odd and >= 1", self.median_kernel)));
        }
        if let Some(c) = self.center {
            if !c.iter().all(|v| v.is_finite()) {
                return Err(UadError::invalid("postprocess.center", format!("{c:?} must be finite")));
            }
        }
        Ok(())
    }

    pub fn center_for(&self, width: usize, height: usize) -> (f64, f64) {
        match self.center {
            Some([cx, cy]) => (cx, cy),
            None => ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
        }
    }
}

pub fn residual(x: &Slice2D, recon: &Slice2D) -> Result<AnomalyMap> {
    if (x.width(), x.height()) != (recon.width(), recon.height()) {
        return Err(UadError::shape("residual", &[x.height(), x.width()], &[recon.height(), recon.width()]));
    }
    let values = x.pixels().iter().zip(recon.pixels()).map(|(a, b)| (a - b).abs()).collect();
    AnomalyMap::new(x.width(), x.height(), values)
}

/// Linear-interpolation percentile (the default definition in numpy).
pub fn percentile(values: &[f32], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Zeroes every value strictly below the slice's `p`-th percentile.
pub fn percentile_threshold(m: &AnomalyMap, p: f64) -> AnomalyMap {
    let t = percentile(&m.values, p);
    m.with_values(m.values.iter().map(|&v| if (v as f64) < t { 0.0 } else { v }).collect())
}

pub fn radial_weight(x: f64, y: f64, cx: f64, cy: f64, r: f64) -> f64 {
    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
    (-d2 / (2.0 * r * r)).exp()
}

/// `exp(-d^2 / (2 r^2))` on the pixel grid, row-major.
pub fn radial_mask(width: usize, height: usize, cfg: &PostprocessConfig) -> Vec<f64> {
    let (cx, cy) = cfg.center_for(width, height);
    (0..height)
        .flat_map(|y| (0..width).map(move |x| radial_weight(x as f64, y as f64, cx, cy, cfg.radius_px)))
        .collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub fn median_filter(values: &[f32], width: usize, height: usize, kernel: usize) -> Vec<f32> {
    if kernel <= 1 {
        return values.to_vec();
    }
    let r = (kernel / 2) as isize;
    let mut window = Vec::with_capacity(kernel * kernel);
    let mut out = Vec::with_capacity(values.len());
    for y in 0..height as isize {
        for x in 0..width as isize {
            window.clear();
            for dy in -r..=r {
                let row = reflect(y + dy, height) * width;
                for dx in -r..=r {
                    window.push(values[row + reflect(x + dx, width)]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
            out.push(*m);
        }
    }
    out
}

/// residual -> percentile threshold -> radial mask -> square -> median filter.
pub fn apply_pipeline(x: &Slice2D, recon: &Slice2D, cfg: &PostprocessConfig) -> Result<AnomalyMap> {
    cfg.validate()?;
    let r = residual(x, recon)?;
    let t = percentile_threshold(&r, cfg.percentile);
    let mask = radial_mask(r.width, r.height, cfg);
    let squared: Vec<f32> = t.values.iter().zip(&mask).map(|(&v, &w)| ((v as f64 * w) as f32).powi(2)).collect();
    let smoothed = median_filter(&squared, r.width, r.height, cfg.median_kernel);
    let mut out = AnomalyMap::new(r.width, r.height, smoothed)?;
    out.provenance = MapProvenance { case_id: x.source().case_id.clone(), slice_index: x.source().index, ..Default::default() };
    Ok(out)
}

/// Stacks per-slice maps (in z order) into a volume on the cropped grid.
pub fn maps_to_volume(id: &str, maps: &[AnomalyMap], spacing: [f32; 3]) -> Result<Volume> {
    let first = maps.first().ok_or_else(|| UadError::invalid("heatmap volume", "no maps"))?;
    let (w, h) = (first.width, first.height);
    let mut voxels = Vec::with_capacity(w * h * maps.len());
    for m in maps {
        if (m.width, m.height) != (w, h) {
            return Err(UadError::shape("heatmap volume", &[h, w], &[m.height, m.width]));
        }
        voxels.extend_from_slice(&m.values);
    }
    Volume::new(id, [w, h, maps.len()], spacing, voxels)
}

/// Per-slice maps of a heatmap volume.
pub fn volume_to_maps(v: &Volume) -> Result<Vec<AnomalyMap>> {
    let [w, h, nz] = v.shape();
    (0..nz)
        .map(|z| {
            let mut m = AnomalyMap::new(w, h, v.slice_z(z).to_vec())?;
            m.provenance.case_id = v.id().to_string();
            m.provenance.slice_index = z;
            Ok(m)
        })
        .collect()
}

/// 8-bit RGB overlay: the heatmap, normalised to its own maximum and coloured with a
/// black-red-yellow-white ramp, alpha-blended at 50% onto the grayscale input.
pub fn save_overlay_png(x: &Slice2D, map: &AnomalyMap, path: &Path) -> Result<()> {
    if (x.width(), x.height()) != (map.width, map.height) {
        return Err(UadError::shape("overlay", &[x.height(), x.width()], &[map.height, map.width]));
    }
    let peak = map.values.iter().fold(0f32, |a, &b| a.max(b));
    let mut img = image::RgbImage::new(map.width as u32, map.height as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        let g = x.pixels()[i];
        let h = if peak > 0.0 { map.values[i] / peak } else { 0.0 };
        let hot = [(3.0 * h).min(1.0), (3.0 * h - 1.0).clamp(0.0, 1.0), (3.0 * h - 2.0).clamp(0.0, 1.0)];
        let px = hot.map(|c| ((0.5 * g + 0.5 * c) * 255.0).round() as u8);
        *p = image::Rgb(px);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| UadError::io(dir, e))?;
    }
    img.save(path).map_err(|e| UadError::invalid("overlay image", format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::volume::SliceSource;

    fn slice(w: usize, h: usize, px: Vec<f32>) -> Slice2D {
        Slice2D::new(w, h, px, SliceSource::default()).unwrap()
    }

    #[test]
    fn residual_examples() {
        let a = slice(2, 1, vec![0.8, 0.1]);
        let b = slice(2, 1, vec![0.3, 0.1]);
        assert!((residual(&a, &b).unwrap().values()[0] - 0.5).abs() < 1e-6);
        assert_eq!(residual(&a, &b).unwrap().values(), residual(&b, &a).unwrap().values());
        assert!(residual(&a, &a).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(residual(&a, &slice(1, 2, vec![0.0; 2])).is_err());
    }

    #[test]
    fn percentile_matches_numpy_definition() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[5.0, 1.0, 3.0], 0.0), 1.0);
        assert_eq!(percentile(&[5.0, 1.0, 3.0], 100.0), 5.0);
        assert!((percentile(&[0.0, 10.0], 20.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_fraction_and_degenerate_cases() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = AnomalyMap::new(96, 96, (0..96 * 96).map(|_| rng.random::<f32>()).collect()).unwrap();
            let zeroed = percentile_threshold(&m, 20.0).values().iter().filter(|&&v| v == 0.0).count();
            assert!((zeroed as f64 / (96.0 * 96.0) - 0.2).abs() <= 0.02);
        }
        let c = AnomalyMap::new(4, 4, vec![0.3; 16]).unwrap();
        assert_eq!(percentile_threshold(&c, 20.0), c);
        let m = AnomalyMap::new(3, 1, vec![0.1, 0.5, 0.2]).unwrap();
        assert_eq!(percentile_threshold(&m, 0.0), m);
    }

    #[test]
    fn radial_mask_values() {
        assert_eq!(radial_weight(48.0, 48.0, 48.0, 48.0, 30.0), 1.0);
        assert!((radial_weight(78.0, 48.0, 48.0, 48.0, 30.0) - (-0.5f64).exp()).abs() < 1e-12);
        let cfg = PostprocessConfig { center: Some([48.0, 48.0]), ..Default::default() };
        let m = radial_mask(96, 96, &cfg);
        assert_eq!(m[48 * 96 + 48], 1.0);
        assert!((m[48 * 96 + 78] - 0.60653).abs() < 1e-5);
        // ring symmetry
        let ring = [(78, 48), (18, 48), (48, 78), (48, 18)];
        for (x, y) in ring {
            assert_eq!(m[y * 96 + x], m[48 * 96 + 78]);
        }
        let d = radial_mask(96, 96, &PostprocessConfig::default());
        assert!(d.iter().all(|&w| w > 0.0 && w <= 1.0));
        assert_eq!(d[47 * 96 + 47], d[48 * 96 + 48]);
    }

    #[test]
    fn median_examples() {
        let mut v = vec![0.0f32; 81];
        v[40] = 9.0;
        assert!(median_filter(&v, 9, 9, 5).iter().all(|&x| x == 0.0));
        let c = vec![0.7f32; 49];
        assert_eq!(median_filter(&c, 7, 7, 5), c);
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
    }

    #[test]
    fn pipeline_identity_and_impulse() {
        let a = slice(16, 16, vec![0.5; 256]);
        let cfg = PostprocessConfig::default();
        assert!(apply_pipeline(&a, &a, &cfg).unwrap().values().iter().all(|&v| v == 0.0));
        let mut px = vec![0.5; 256];
        px[8 * 16 + 8] = 1.0;
        let b = slice(16, 16, px);
        assert!(apply_pipeline(&b, &a, &cfg).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(PostprocessConfig { median_kernel: 4, ..cfg }.validate().is_err());
        assert!(PostprocessConfig { percentile: 101.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn heatmap_volume_and_overlay() {
        let maps: Vec<AnomalyMap> = (0..3).map(|z| AnomalyMap::new(4, 4, vec![z as f32; 16]).unwrap()).collect();
        let v = maps_to_volume("h", &maps, [0.5, 0.5, 1.0]).unwrap();
        assert_eq!(v.shape(), [4, 4, 3]);
        let back = volume_to_maps(&v).unwrap();
        assert_eq!(back[2].values(), maps[2].values());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.png");
        save_overlay_png(&slice(4, 4, vec![0.5; 16]), &maps[2], &p).unwrap();
        assert!(p.exists());
    }

    proptest! {
        #[test]
        fn pipeline_is_nonnegative_pure_and_masked_values_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = slice(24, 24, (0..576).map(|_| rng.random::<f32>()).collect());
            let y = slice(24, 24, (0..576).map(|_| rng.random::<f32>()).collect());
            let cfg = PostprocessConfig::default();
            let a = apply_pipeline(&x, &y, &cfg).unwrap();
            prop_assert!(a.values().iter().all(|&v| v >= 0.0));
            prop_assert_eq!(&a, &apply_pipeline(&x, &y, &cfg).unwrap());
            let t = percentile_threshold(&residual(&x, &y).unwrap(), 20.0);
            let mask = radial_mask(24, 24, &cfg);
            for (v, w) in t.values().iter().zip(&mask) {
                prop_assert!(((*v as f64) * w) as f32 <= *v);
            }
            // the median of a window never exceeds the window maximum
            let sq: Vec<f32> = t.values().iter().zip(&mask).map(|(&v, &w)| ((v as f64 * w) as f32).powi(2)).collect();
            let peak = sq.iter().fold(0f32, |m, &v| m.max(v));
            prop_assert!(a.values().iter().all(|&v| v <= peak));
        }
    }
}
