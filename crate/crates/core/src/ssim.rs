//! Gaussian-windowed structural similarity and its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UadError};
use crate::volume::Slice2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, window_sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(UadError::invalid("ssim window", format!("{} must be odd and >= 3", self.window)));
        }
        for (name, v) in [("window_sigma", self.window_sigma), ("k1", self.k1), ("k2", self.k2), ("dynamic_range", self.dynamic_range)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(UadError::invalid("ssim config", format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    /// Window actually used on an `h x w` image: the configured size, shrunk to the
    /// largest odd size that fits.
    pub fn effective_window(&self, h: usize, w: usize) -> Result<usize> {
        self.validate()?;
        let fit = h.min(w);
        let fit = if fit.is_multiple_of(2) { fit.saturating_sub(1) } else { fit };
        if fit < 3 {
            return Err(UadError::invalid("ssim input", format!("{h}x{w} is smaller than a 3x3 window")));
        }
        Ok(self.window.min(fit))
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter evaluated only where the window fits entirely.
struct Window {
    k: Vec<f64>,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn new(cfg: &SsimConfig, h: usize, w: usize) -> Result<Self> {
        let size = cfg.effective_window(h, w)?;
        Ok(Self { k: gaussian_kernel(size, cfg.window_sigma), h, w, oh: h - size + 1, ow: w - size + 1 })
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn apply(&self, img: &[f64]) -> Vec<f64> {
        let n = self.k.len();
        let mut rows = vec![0.0; self.h * self.ow];
        for y in 0..self.h {
            let src = &img[y * self.w..(y + 1) * self.w];
            for x in 0..self.ow {
                rows[y * self.ow + x] = self.k.iter().zip(&src[x..x + n]).map(|(k, v)| k * v).sum();
            }
        }
        let mut out = vec![0.0; self.oh * self.ow];
        for y in 0..self.oh {
            for (a, &k) in self.k.iter().enumerate() {
                let src = &rows[(y + a) * self.ow..(y + a + 1) * self.ow];
                for (o, s) in out[y * self.ow..(y + 1) * self.ow].iter_mut().zip(src) {
                    *o += k * s;
                }
            }
        }
        out
    }

    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let n = self.k.len();
        let mut rows = vec![0.0; self.h * self.ow];
        for y in 0..self.oh {
            for (a, &k) in self.k.iter().enumerate() {
                let dst = &mut rows[(y + a) * self.ow..(y + a + 1) * self.ow];
                for (d, s) in dst.iter_mut().zip(&g[y * self.ow..(y + 1) * self.ow]) {
                    *d += k * s;
                }
            }
        }
        let mut out = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            let dst = &mut out[y * self.w..(y + 1) * self.w];
            for x in 0..self.ow {
                let r = rows[y * self.ow + x];
                for (d, k) in dst[x..x + n].iter_mut().zip(&self.k) {
                    *d += k * r;
                }
            }
        }
        out
    }
}

/// Filtered first and second moments of one image.
struct Moments {
    mu: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn of(win: &Window, img: &[f64]) -> Self {
        let sq: Vec<f64> = img.iter().map(|v| v * v).collect();
        Self { mu: win.apply(img), sq: win.apply(&sq) }
    }
}

fn check_len(len: usize, h: usize, w: usize, what: &str) -> Result<()> {
    if len != h * w {
        return Err(UadError::shape(what, &[h * w], &[len]));
    }
    Ok(())
}

fn product_map(win: &Window, x: &[f64], y: &[f64]) -> Vec<f64> {
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    win.apply(&xy)
}

fn mean_ssim(cfg: &SsimConfig, mx: &Moments, my: &Moments, xy: &[f64], luminance: bool) -> f64 {
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    for p in 0..xy.len() {
        let (ux, uy) = (mx.mu[p], my.mu[p]);
        let vx = mx.sq[p] - ux * ux;
        let vy = my.sq[p] - uy * uy;
        let cov = xy[p] - ux * uy;
        let cs = (2.0 * cov + c2) / (vx + vy + c2);
        total += if luminance { cs * (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1) } else { cs };
    }
    total / xy.len() as f64
}

/// Mean SSIM of two row-major `h x w` images.
pub fn ssim_raw(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Result<f64> {
    check_len(x.len(), h, w, "ssim first input")?;
    check_len(y.len(), h, w, "ssim second input")?;
    let win = Window::new(cfg, h, w)?;
    let (mx, my) = (Moments::of(&win, x), Moments::of(&win, y));
    Ok(mean_ssim(cfg, &mx, &my, &product_map(&win, x, y), true))
}

/// Mean of the contrast-structure factor only (SSIM without the luminance term).
pub fn ssim_cs_raw(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Result<f64> {
    check_len(x.len(), h, w, "ssim first input")?;
    check_len(y.len(), h, w, "ssim second input")?;
    let win = Window::new(cfg, h, w)?;
    let (mx, my) = (Moments::of(&win, x), Moments::of(&win, y));
    Ok(mean_ssim(cfg, &mx, &my, &product_map(&win, x, y), false))
}

fn dims(a: &Slice2D, b: &Slice2D) -> Result<(usize, usize)> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(UadError::shape("ssim inputs", &[a.height(), a.width()], &[b.height(), b.width()]));
    }
    Ok((a.height(), a.width()))
}

pub fn ssim(a: &Slice2D, b: &Slice2D, cfg: &SsimConfig) -> Result<f64> {
    let (h, w) = dims(a, b)?;
    ssim_raw(&a.to_f64(), &b.to_f64(), h, w, cfg)
}

/// Mean SSIM and its gradient with respect to `y`.
pub fn ssim_grad(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Result<(f64, Vec<f64>)> {
    check_len(x.len(), h, w, "ssim first input")?;
    check_len(y.len(), h, w, "ssim second input")?;
    let win = Window::new(cfg, h, w)?;
    let (mx, my) = (Moments::of(&win, x), Moments::of(&win, y));
    let xy = product_map(&win, x, y);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let p = win.positions();
    let (mut alpha, mut beta, mut gamma) = (vec![0.0; p], vec![0.0; p], vec![0.0; p]);
    let mut total = 0.0;
    for i in 0..p {
        let (ux, uy) = (mx.mu[i], my.mu[i]);
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * (xy[i] - ux * uy) + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = (mx.sq[i] - ux * ux) + (my.sq[i] - uy * uy) + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        let d_a1 = a2 / (b1 * b2);
        let d_a2 = a1 / (b1 * b2);
        let d_b1 = -s / b1;
        let d_b2 = -s / b2;
        alpha[i] = d_a1 * 2.0 * ux - d_a2 * 2.0 * ux + d_b1 * 2.0 * uy - d_b2 * 2.0 * uy;
        beta[i] = d_b2;
        gamma[i] = 2.0 * d_a2;
    }
    let inv = 1.0 / p as f64;
    let (ga, gb, gc) = (win.adjoint(&alpha), win.adjoint(&beta), win.adjoint(&gamma));
    let grad = (0..h * w).map(|j| inv * (ga[j] + 2.0 * y[j] * gb[j] + x[j] * gc[j])).collect();
    Ok((total * inv, grad))
}

/// A fixed image with cached moments, for comparing many candidates against it.
pub struct SsimReference {
    pixels: Vec<f64>,
    moments: Moments,
    win: Window,
    cfg: SsimConfig,
}

impl SsimReference {
    pub fn new(slice: &Slice2D, cfg: &SsimConfig) -> Result<Self> {
        let win = Window::new(cfg, slice.height(), slice.width())?;
        let pixels = slice.to_f64();
        Ok(Self { moments: Moments::of(&win, &pixels), pixels, win, cfg: *cfg })
    }

    pub fn ssim(&self, other: &SsimReference) -> Result<f64> {
        if (self.win.h, self.win.w) != (other.win.h, other.win.w) {
            return Err(UadError::shape("ssim inputs", &[self.win.h, self.win.w], &[other.win.h, other.win.w]));
        }
        let xy = product_map(&self.win, &self.pixels, &other.pixels);
        Ok(mean_ssim(&self.cfg, &self.moments, &other.moments, &xy, true))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::volume::SliceSource;

    fn noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    /// Direct per-window evaluation with the full 2D weight table.
    fn brute_force(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> f64 {
        let n = cfg.effective_window(h, w).unwrap();
        let k = gaussian_kernel(n, cfg.window_sigma);
        let (c1, c2) = ((cfg.k1 * cfg.dynamic_range).powi(2), (cfg.k2 * cfg.dynamic_range).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..=h - n {
            for c in 0..=w - n {
                let (mut ux, mut uy) = (0.0, 0.0);
                for a in 0..n {
                    for b in 0..n {
                        let i = (r + a) * w + c + b;
                        ux += k[a] * k[b] * x[i];
                        uy += k[a] * k[b] * y[i];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for a in 0..n {
                    for b in 0..n {
                        let i = (r + a) * w + c + b;
                        vx += k[a] * k[b] * (x[i] - ux).powi(2);
                        vy += k[a] * k[b] * (y[i] - uy).powi(2);
                        cov += k[a] * k[b] * (x[i] - ux) * (y[i] - uy);
                    }
                }
                total += (2.0 * ux * uy + c1) * (2.0 * cov + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn identity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = noise(&mut rng, 96 * 96);
        let s = ssim_raw(&x, &x, 96, 96, &SsimConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_on_small_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SsimConfig::default();
        for _ in 0..5 {
            let (x, y) = (noise(&mut rng, 64), noise(&mut rng, 64));
            let fast = ssim_raw(&x, &y, 8, 8, &cfg).unwrap();
            assert!((fast - brute_force(&x, &y, 8, 8, &cfg)).abs() < 1e-9);
        }
        let (x, y) = (noise(&mut rng, 16 * 20), noise(&mut rng, 16 * 20));
        assert!((ssim_raw(&x, &y, 16, 20, &cfg).unwrap() - brute_force(&x, &y, 16, 20, &cfg)).abs() < 1e-9);
    }

    #[test]
    fn independent_noise_is_dissimilar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SsimConfig::default();
        for _ in 0..100 {
            let (x, y) = (noise(&mut rng, 96 * 96), noise(&mut rng, 96 * 96));
            assert!(ssim_raw(&x, &y, 96, 96, &cfg).unwrap().abs() < 0.1);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SsimConfig::default();
        let (x, y) = (noise(&mut rng, 64), noise(&mut rng, 64));
        let (s, g) = ssim_grad(&x, &y, 8, 8, &cfg).unwrap();
        assert!((s - ssim_raw(&x, &y, 8, 8, &cfg).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for j in 0..64 {
            let (mut yp, mut ym) = (y.clone(), y.clone());
            yp[j] += h;
            ym[j] -= h;
            let fd = (ssim_raw(&x, &yp, 8, 8, &cfg).unwrap() - ssim_raw(&x, &ym, 8, 8, &cfg).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 + 1e-4 * fd.abs(), "pixel {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn errors() {
        let cfg = SsimConfig::default();
        assert!(ssim_raw(&[0.0; 64], &[0.0; 63], 8, 8, &cfg).is_err());
        assert!(ssim_raw(&[0.0; 4], &[0.0; 4], 2, 2, &cfg).is_err());
        assert!(SsimConfig { window: 4, ..cfg }.validate().is_err());
        assert!(SsimConfig { k1: 0.0, ..cfg }.validate().is_err());
        let a = Slice2D::new(4, 4, vec![0.0; 16], SliceSource::default()).unwrap();
        let b = Slice2D::new(8, 2, vec![0.0; 16], SliceSource::default()).unwrap();
        assert!(ssim(&a, &b, &cfg).is_err());
    }

    #[test]
    fn reference_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SsimConfig::default();
        let a = Slice2D::new(24, 24, noise(&mut rng, 576).iter().map(|&v| v as f32).collect(), SliceSource::default()).unwrap();
        let b = Slice2D::new(24, 24, noise(&mut rng, 576).iter().map(|&v| v as f32).collect(), SliceSource::default()).unwrap();
        let direct = ssim(&a, &b, &cfg).unwrap();
        let cached = SsimReference::new(&a, &cfg).unwrap().ssim(&SsimReference::new(&b, &cfg).unwrap()).unwrap();
        assert!((direct - cached).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = (noise(&mut rng, 144), noise(&mut rng, 144));
            let cfg = SsimConfig::default();
            let ab = ssim_raw(&x, &y, 12, 12, &cfg).unwrap();
            let ba = ssim_raw(&y, &x, 12, 12, &cfg).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn contrast_structure_is_offset_invariant(seed in any::<u64>(), offset in -0.2f64..0.2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = noise(&mut rng, 256).iter().map(|v| 0.3 + 0.4 * v).collect();
            let y: Vec<f64> = noise(&mut rng, 256).iter().map(|v| 0.3 + 0.4 * v).collect();
            let cfg = SsimConfig::default();
            let base = ssim_cs_raw(&x, &y, 16, 16, &cfg).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v + offset).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + offset).collect();
            prop_assert!((ssim_cs_raw(&xs, &ys, 16, 16, &cfg).unwrap() - base).abs() < 1e-6);
            let same = ssim_raw(&xs, &xs, 16, 16, &cfg).unwrap();
            prop_assert!((same - 1.0).abs() < 1e-9);
        }
    }
}
