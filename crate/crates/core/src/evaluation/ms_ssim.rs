//! Multi-scale structural similarity on luminance.
//!
//! Five scales, 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03,
//! dynamic range 255. Contrast-structure terms are taken at every scale but
//! the last, full SSIM at the last, and the terms are combined with the
//! standard exponents. Windows are "valid" (no padding); odd dimensions are
//! padded by repeating the last row/column before 2×2 average pooling.

use crate::error::{PipelineError, Result};
use crate::raster::Raster;

pub const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 255.0;

/// Smallest image side accepted for `scales` scales.
pub fn min_side(scales: usize) -> usize {
    (1 << (scales - 1)) * WINDOW
}

#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&other.v).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// 2×2 average pooling; an odd trailing row/column is duplicated first.
    fn downsample(&self) -> Plane {
        let (w2, h2) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let at = |x: usize, y: usize| self.v[y.min(self.h - 1) * self.w + x.min(self.w - 1)];
        let mut v = Vec::with_capacity(w2 * h2);
        for y in 0..h2 {
            for x in 0..w2 {
                let (sx, sy) = (2 * x, 2 * y);
                v.push((at(sx, sy) + at(sx + 1, sy) + at(sx, sy + 1) + at(sx + 1, sy + 1)) / 4.0);
            }
        }
        Plane { w: w2, h: h2, v }
    }
}

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW as f64 - 1.0) / 2.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian filter, valid region only.
fn filter(p: &Plane, k: &[f64; WINDOW]) -> Plane {
    let ow = p.w + 1 - WINDOW;
    let oh = p.h + 1 - WINDOW;
    let mut rows = vec![0.0; ow * p.h];
    for y in 0..p.h {
        let row = &p.v[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&row[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut v = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            v[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    Plane { w: ow, h: oh, v }
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_cs(a: &Plane, b: &Plane, k: &[f64; WINDOW]) -> (f64, f64) {
    let c1 = (K1 * L).powi(2);
    let c2 = (K2 * L).powi(2);
    let mu_a = filter(a, k);
    let mu_b = filter(b, k);
    let aa = filter(&a.map2(a, |x, y| x * y), k);
    let bb = filter(&b.map2(b, |x, y| x * y), k);
    let ab = filter(&a.map2(b, |x, y| x * y), k);
    let n = mu_a.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let var_a = aa.v[i] - ma * ma;
        let var_b = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let c = (2.0 * cov + c2) / (var_a + var_b + c2);
        ssim += lum * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

/// MS-SSIM between two luminance planes of equal size.
pub fn ms_ssim_luma(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(PipelineError::invalid("luminance buffers do not match their dimensions"));
    }
    let need = min_side(WEIGHTS.len());
    if width.min(height) < need {
        return Err(PipelineError::invalid(format!(
            "MS-SSIM needs images at least {need}x{need}, got {width}x{height}"
        )));
    }
    let k = kernel();
    let mut pa = Plane { w: width, h: height, v: a.to_vec() };
    let mut pb = Plane { w: width, h: height, v: b.to_vec() };
    let mut value = 1.0;
    for (scale, weight) in WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_cs(&pa, &pb, &k);
        let term = if scale + 1 == WEIGHTS.len() { ssim } else { cs };
        value *= term.max(0.0).powf(*weight);
        if scale + 1 < WEIGHTS.len() {
            pa = pa.downsample();
            pb = pb.downsample();
        }
    }
    Ok(value.clamp(0.0, 1.0))
}

/// MS-SSIM between two rasters over BT.601 luminance.
pub fn ms_ssim(a: &Raster, b: &Raster) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(PipelineError::invalid(format!(
            "MS-SSIM inputs differ in size: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    ms_ssim_luma(&a.luma(), &b.luma(), a.width() as usize, a.height() as usize)
}
