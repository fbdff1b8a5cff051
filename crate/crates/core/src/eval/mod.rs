//! Synthetic phantoms, acquisition simulation, image metrics and the
//! benchmark runner.

mod bench;
mod metrics;
mod panels;

pub use bench::{
    cell_inputs, median, run_benchmark, run_benchmark_with, score, BenchConfig, BenchReport, BenchRow,
    CellInputs, Method,
};
pub use metrics::{
    psnr, psnr_from_mse, ssim, ssim_global, unit_magnitude, Psnr, SSIM_C1, SSIM_C2,
};
pub use panels::{write_gray_png, write_panel};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{EncodingOperator, KSpaceData};
use crate::error::{Error, Result};
use crate::grid::{normalize, to_pseudo_real, ComplexGrid, Domain, PseudoRealStack};

/// One ellipse in normalized coordinates (`[-1, 1]` across each axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Everything needed to regenerate a phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDescriptor {
    pub seed: u64,
    pub ellipses: Vec<Ellipse>,
    /// Phase `px x + py y + p0` in radians, coordinates in `[-1, 1]`.
    pub phase: (f64, f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: ComplexGrid,
    pub descriptor: PhantomDescriptor,
}

/// Random overlapping ellipses inside a head-like outline, with a smooth
/// phase ramp. Magnitudes lie in `[0, 1]` with maximum exactly 1 unless
/// `n_ellipses` is 0, which gives the zero image.
pub fn gen_phantom(h: usize, w: usize, seed: u64, n_ellipses: usize) -> Result<Phantom> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidParameter(format!(
            "phantoms need at least 16x16, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ellipses = Vec::with_capacity(n_ellipses);
    if n_ellipses > 0 {
        let a = rng.gen_range(0.62..0.78);
        let b = rng.gen_range(0.75..0.9);
        ellipses.push(Ellipse {
            cx: rng.gen_range(-0.05..0.05),
            cy: rng.gen_range(-0.05..0.05),
            a,
            b,
            angle: rng.gen_range(-0.2..0.2),
            intensity: rng.gen_range(0.5..0.8),
        });
        if n_ellipses > 1 {
            // darker inner band, like the skull / brain boundary
            ellipses.push(Ellipse {
                cx: ellipses[0].cx,
                cy: ellipses[0].cy,
                a: a * 0.88,
                b: b * 0.9,
                angle: ellipses[0].angle,
                intensity: -rng.gen_range(0.2..0.35),
            });
        }
        for _ in 2..n_ellipses {
            let r = rng.gen_range(0.0..0.5);
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            ellipses.push(Ellipse {
                cx: r * th.cos() * a,
                cy: r * th.sin() * b,
                a: rng.gen_range(0.05..0.3),
                b: rng.gen_range(0.05..0.3),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                intensity: rng.gen_range(-0.25..0.45),
            });
        }
    }
    let phase = (
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    );
    let descriptor = PhantomDescriptor {
        seed,
        ellipses,
        phase,
    };
    let image = render_phantom(h, w, &descriptor);
    Ok(Phantom { image, descriptor })
}

/// Rasterizes a descriptor; magnitudes are clipped at 0 and scaled so the
/// maximum is 1.
pub fn render_phantom(h: usize, w: usize, d: &PhantomDescriptor) -> ComplexGrid {
    let coord = |i: usize, n: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    let mut mag = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (coord(c, w), coord(r, h));
            let v: f64 = d
                .ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.intensity)
                .sum();
            mag[r * w + c] = v.max(0.0);
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let (px, py, p0) = d.phase;
    ComplexGrid::from_fn(1, h, w, Domain::Image, |_, r, c| {
        let m = mag[r * w + c] * scale;
        if m == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::from_polar(m, px * coord(c, w) + py * coord(r, h) + p0)
        }
    })
}

/// Noiseless measurements `A x`.
pub fn simulate_acquisition(image: &ComplexGrid, op: &EncodingOperator) -> Result<KSpaceData> {
    op.forward(image)
}

/// Normalized pseudo-real phantoms, one per seed, for training or prior
/// fitting.
pub fn phantom_dataset(
    h: usize,
    w: usize,
    seeds: impl IntoIterator<Item = u64>,
    n_ellipses: usize,
) -> Result<Vec<PseudoRealStack>> {
    seeds
        .into_iter()
        .map(|s| {
            let ph = gen_phantom(h, w, s, n_ellipses)?;
            Ok(to_pseudo_real(&normalize(&ph.image)?.0))
        })
        .collect()
}
