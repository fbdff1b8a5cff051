//! PSNR and SSIM on magnitude images with a peak value of 1.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::ComplexGrid;

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

/// PSNR in dB; identical images are flagged rather than returning an error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Identical,
}

impl Psnr {
    /// Decibels, `+inf` for identical images.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Identical => f64::INFINITY,
        }
    }

    pub fn is_identical(self) -> bool {
        matches!(self, Psnr::Identical)
    }
}

/// `|x| / max |x|` as a real-valued grid (all zeros stays zero).
pub fn unit_magnitude(x: &ComplexGrid) -> ComplexGrid {
    let max = x.max_magnitude();
    let s = if max > 0.0 { 1.0 / max } else { 0.0 };
    x.map(|z| Complex64::new(z.norm() * s, 0.0))
}

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Finite(-10.0 * mse.log10())
    }
}

fn magnitudes(x: &ComplexGrid) -> Vec<f64> {
    x.data().iter().map(|z| z.norm()).collect()
}

/// PSNR of magnitude images with peak 1. Inputs are expected in `[0, 1]`.
pub fn psnr(x: &ComplexGrid, reference: &ComplexGrid) -> Result<Psnr> {
    x.check_same_shape(reference)?;
    let (a, b) = (magnitudes(x), magnitudes(reference));
    let mse = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Single-statistic SSIM over whole images (averaged over frames).
pub fn ssim_global(x: &ComplexGrid, reference: &ComplexGrid) -> Result<f64> {
    x.check_same_shape(reference)?;
    let n = x.height() * x.width();
    let mut total = 0.0;
    for f in 0..x.frames() {
        let a = x.magnitude(f);
        let b = reference.magnitude(f);
        let mx = a.iter().sum::<f64>() / n as f64;
        let my = b.iter().sum::<f64>() / n as f64;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (p, q) in a.iter().zip(&b) {
            vx += (p - mx).powi(2);
            vy += (q - my).powi(2);
            cxy += (p - mx) * (q - my);
        }
        let nf = n as f64;
        total += ssim_formula(mx, my, vx / nf, vy / nf, cxy / nf);
    }
    Ok(total / x.frames() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering with the Gaussian window.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..WINDOW).map(|k| g[k] * img[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..WINDOW).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over 11x11 Gaussian windows (sigma 1.5), valid positions only.
/// Falls back to [`ssim_global`] when an image is smaller than the window.
pub fn ssim(x: &ComplexGrid, reference: &ComplexGrid) -> Result<f64> {
    x.check_same_shape(reference)?;
    let (h, w) = (x.height(), x.width());
    if h < WINDOW || w < WINDOW {
        return ssim_global(x, reference);
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for f in 0..x.frames() {
        let a = x.magnitude(f);
        let b = reference.magnitude(f);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&a, h, w, &g);
        let my = filter_valid(&b, h, w, &g);
        let exx = filter_valid(&prod(&a, &a), h, w, &g);
        let eyy = filter_valid(&prod(&b, &b), h, w, &g);
        let exy = filter_valid(&prod(&a, &b), h, w, &g);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let vx = exx[i] - mx[i] * mx[i];
            let vy = eyy[i] - my[i] * my[i];
            let cxy = exy[i] - mx[i] * my[i];
            acc += ssim_formula(mx[i], my[i], vx, vy, cxy);
        }
        total += acc / n as f64;
    }
    let v = total / x.frames() as f64;
    if v.is_finite() {
        Ok(v.clamp(-1.0, 1.0))
    } else {
        Err(Error::DegenerateInput("SSIM is not finite".into()))
    }
}
