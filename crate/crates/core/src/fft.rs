//! Centered, orthonormal 2D DFT applied plane by plane.
//!
//! DC sits at `(h / 2, w / 2)` and both directions are scaled by
//! `1 / sqrt(h * w)`, so the transform is unitary.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::grid::{ComplexGrid, Domain};

/// Cached row/column plans for one plane size.
pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("h", &self.h).field("w", &self.w).finish()
    }
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft(w, FftDirection::Forward),
            row_inv: planner.plan_fft(w, FftDirection::Inverse),
            col_fwd: planner.plan_fft(h, FftDirection::Forward),
            col_inv: planner.plan_fft(h, FftDirection::Inverse),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// In-place centered transform of one row-major `h x w` plane.
    pub fn transform_plane(&self, plane: &mut [Complex64], dir: FftDirection) {
        let (h, w) = (self.h, self.w);
        assert_eq!(plane.len(), h * w);
        let (row, col) = match dir {
            FftDirection::Forward => (&self.row_fwd, &self.col_fwd),
            FftDirection::Inverse => (&self.row_inv, &self.col_inv),
        };
        // ifftshift, transform, fftshift
        let mut buf = shifted(plane, h, w, h - h / 2, w - w / 2);
        row.process(&mut buf);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = buf[r * w + c];
            }
            col.process(&mut column);
            for r in 0..h {
                buf[r * w + c] = column[r];
            }
        }
        let out = shifted(&buf, h, w, h / 2, w / 2);
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for (dst, src) in plane.iter_mut().zip(out) {
            *dst = src * scale;
        }
    }

    fn apply(&self, g: &ComplexGrid, dir: FftDirection, target: Domain) -> ComplexGrid {
        assert_eq!((g.height(), g.width()), (self.h, self.w), "plan size mismatch");
        let mut out = g.clone();
        for k in 0..g.frames() {
            self.transform_plane(out.plane_mut(k), dir);
        }
        out.set_domain(target);
        out
    }

    /// Image to k-space.
    pub fn forward(&self, g: &ComplexGrid) -> ComplexGrid {
        self.apply(g, FftDirection::Forward, g.domain().flipped())
    }

    /// K-space to image.
    pub fn inverse(&self, g: &ComplexGrid) -> ComplexGrid {
        self.apply(g, FftDirection::Inverse, g.domain().flipped())
    }
}

/// Circular shift by `(dr, dc)`: `out[(r + dr) % h][(c + dc) % w] = in[r][c]`.
fn shifted(src: &[Complex64], h: usize, w: usize, dr: usize, dc: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        let rr = (r + dr) % h;
        for c in 0..w {
            out[rr * w + (c + dc) % w] = src[r * w + c];
        }
    }
    out
}

pub fn fft2c(g: &ComplexGrid) -> ComplexGrid {
    Fft2::new(g.height(), g.width()).forward(g)
}

pub fn ifft2c(g: &ComplexGrid) -> ComplexGrid {
    Fft2::new(g.height(), g.width()).inverse(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(frames: usize, h: usize, w: usize, seed: u64) -> ComplexGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexGrid::from_fn(frames, h, w, Domain::Image, |_, _, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    /// Direct O(n^2) centered DFT used as an oracle.
    fn naive_centered_dft(plane: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let phase = -2.0
                            * std::f64::consts::PI
                            * ((u as f64 - ch) * (r as f64 - ch) / h as f64
                                + (v as f64 - cw) * (c as f64 - cw) / w as f64);
                        acc += plane[r * w + c] * Complex64::from_polar(1.0, phase);
                    }
                }
                out[u * w + v] = acc / ((h * w) as f64).sqrt();
            }
        }
        out
    }

    #[test]
    fn matches_direct_dft_even_and_odd() {
        for (h, w) in [(4, 6), (5, 3), (8, 8), (7, 4)] {
            let g = random_grid(1, h, w, (h * 31 + w) as u64);
            let fast = fft2c(&g);
            let slow = naive_centered_dft(g.plane(0), h, w);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).norm() < 1e-10, "{h}x{w}");
            }
        }
    }

    #[test]
    fn centered_impulse_is_flat() {
        let mut g = ComplexGrid::zeros(1, 8, 16, Domain::Image);
        g.set(0, 4, 8, Complex64::new(1.0, 0.0));
        let k = fft2c(&g);
        assert_eq!(k.domain(), Domain::KSpace);
        let expected = 1.0 / (128f64).sqrt();
        for z in k.data() {
            assert!((z.re - expected).abs() < 1e-12 && z.im.abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        for (h, w) in [(16, 16), (9, 12)] {
            let g = random_grid(3, h, w, 5);
            let k = fft2c(&g);
            assert!((k.norm() - g.norm()).abs() < 1e-10 * g.norm());
            let back = ifft2c(&k);
            assert_eq!(back.domain(), Domain::Image);
            assert!(back.sub(&g).unwrap().norm() < 1e-12 * g.norm().max(1.0));
        }
    }
}
