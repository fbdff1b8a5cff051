//! Parallel-imaging measurement operator `A = F M s^c`, its Hermitian
//! adjoint and synthetic coil sensitivities.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cxg::Tensor;
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::grid::{ComplexGrid, Domain};
use crate::masks::SamplingMask;

/// Complex coil maps, stored `(coil, row, col)`, with `sum_c |s_c(p)|^2 = 1`
/// at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSensitivities {
    n_coils: usize,
    h: usize,
    w: usize,
    maps: Vec<Complex64>,
}

impl CoilSensitivities {
    /// Single coil with unit sensitivity everywhere.
    pub fn unit(h: usize, w: usize) -> Self {
        Self {
            n_coils: 1,
            h,
            w,
            maps: vec![Complex64::new(1.0, 0.0); h * w],
        }
    }

    /// Wraps maps that are already pixel-wise normalized (checked to 1e-6).
    pub fn new(n_coils: usize, h: usize, w: usize, maps: Vec<Complex64>) -> Result<Self> {
        let s = Self::unchecked(n_coils, h, w, maps)?;
        for p in 0..h * w {
            let e = s.energy_at(p);
            if (e - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidParameter(format!(
                    "coil maps not normalized at pixel {p}: sum |s|^2 = {e}"
                )));
            }
        }
        Ok(s)
    }

    /// Rescales arbitrary maps so that each pixel has unit total energy.
    pub fn normalized(n_coils: usize, h: usize, w: usize, maps: Vec<Complex64>) -> Result<Self> {
        let mut s = Self::unchecked(n_coils, h, w, maps)?;
        for p in 0..h * w {
            let e = s.energy_at(p);
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "coil maps vanish at pixel {p}"
                )));
            }
            let k = 1.0 / e.sqrt();
            for c in 0..n_coils {
                s.maps[c * h * w + p] *= k;
            }
        }
        Ok(s)
    }

    fn unchecked(n_coils: usize, h: usize, w: usize, maps: Vec<Complex64>) -> Result<Self> {
        if n_coils == 0 {
            return Err(Error::InvalidParameter("need at least one coil".into()));
        }
        if maps.len() != n_coils * h * w {
            return Err(Error::Shape(format!(
                "{n_coils} coil maps of {h}x{w} need {} values, got {}",
                n_coils * h * w,
                maps.len()
            )));
        }
        Ok(Self {
            n_coils,
            h,
            w,
            maps,
        })
    }

    fn energy_at(&self, p: usize) -> f64 {
        (0..self.n_coils)
            .map(|c| self.maps[c * self.h * self.w + p].norm_sqr())
            .sum()
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn map(&self, coil: usize) -> &[Complex64] {
        let n = self.h * self.w;
        &self.maps[coil * n..(coil + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::complex(vec![self.n_coils, self.h, self.w], self.maps.clone())
    }

    /// Loads `(coil, row, col)` maps and renormalizes them, since the f32
    /// payload is not exactly normalized.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (dims, data) = t.into_complex()?;
        if dims.len() != 3 {
            return Err(Error::Shape(format!("coil maps must be 3D, got {dims:?}")));
        }
        Self::normalized(dims[0], dims[1], dims[2], data)
    }
}

/// Smooth Gaussian-bump coil profiles centered at evenly spaced points on the
/// boundary ellipse, each with a smooth phase ramp, then normalized.
pub fn gen_coil_maps(n_coils: usize, h: usize, w: usize, seed: u64) -> Result<CoilSensitivities> {
    if n_coils == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidParameter(format!(
            "invalid coil map request: {n_coils} coils of {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen::<f64>() * std::f64::consts::TAU;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let width = 0.45 * h.max(w) as f64;
    let mut maps = Vec::with_capacity(n_coils * h * w);
    for c in 0..n_coils {
        let ang = offset + std::f64::consts::TAU * c as f64 / n_coils as f64;
        let (py, px) = (cy + cy * ang.sin(), cx + cx * ang.cos());
        let phase0 = rng.gen::<f64>() * std::f64::consts::TAU;
        let ramp = rng.gen_range(-1.0..1.0) * std::f64::consts::PI / h.max(w) as f64;
        for r in 0..h {
            for col in 0..w {
                let (dy, dx) = (r as f64 - py, col as f64 - px);
                let mag = (-(dy * dy + dx * dx) / (2.0 * width * width)).exp();
                let phase = phase0 + ramp * (dy * ang.sin() + dx * ang.cos());
                maps.push(Complex64::from_polar(mag, phase));
            }
        }
    }
    CoilSensitivities::normalized(n_coils, h, w, maps)
}

/// Multi-coil k-space, stored `(coil, frame, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData {
    coils: usize,
    frames: usize,
    h: usize,
    w: usize,
    data: Vec<Complex64>,
}

impl KSpaceData {
    pub fn zeros(coils: usize, frames: usize, h: usize, w: usize) -> Self {
        Self {
            coils,
            frames,
            h,
            w,
            data: vec![Complex64::new(0.0, 0.0); coils * frames * h * w],
        }
    }

    pub fn from_vec(
        coils: usize,
        frames: usize,
        h: usize,
        w: usize,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if data.len() != coils * frames * h * w {
            return Err(Error::Shape(format!(
                "k-space {coils}x{frames}x{h}x{w} needs {} values, got {}",
                coils * frames * h * w,
                data.len()
            )));
        }
        Ok(Self {
            coils,
            frames,
            h,
            w,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.coils, self.frames, self.h, self.w)
    }
    pub fn coils(&self) -> usize {
        self.coils
    }
    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    fn coil_len(&self) -> usize {
        self.frames * self.h * self.w
    }

    pub fn coil(&self, c: usize) -> &[Complex64] {
        let n = self.coil_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn coil_mut(&mut self, c: usize) -> &mut [Complex64] {
        let n = self.coil_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copy of one coil as a k-space grid.
    pub fn coil_grid(&self, c: usize) -> ComplexGrid {
        ComplexGrid::from_vec(self.frames, self.h, self.w, Domain::KSpace, self.coil(c).to_vec())
            .expect("consistent dims")
    }

    fn check_same_shape(&self, other: &KSpaceData) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        KSpaceData::from_vec(
            self.coils,
            self.frames,
            self.h,
            self.w,
            self.data.iter().map(|z| z * s).collect(),
        )
        .expect("same dims")
    }

    pub fn axpy(&self, a: f64, other: &KSpaceData) -> Result<Self> {
        self.check_same_shape(other)?;
        KSpaceData::from_vec(
            self.coils,
            self.frames,
            self.h,
            self.w,
            self.data.iter().zip(&other.data).map(|(x, y)| x + y * a).collect(),
        )
    }

    pub fn sub(&self, other: &KSpaceData) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    pub fn add(&self, other: &KSpaceData) -> Result<Self> {
        self.axpy(1.0, other)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn inner(&self, other: &KSpaceData) -> Result<Complex64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::complex(vec![self.coils, self.frames, self.h, self.w], self.data.clone())
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (dims, data) = t.into_complex()?;
        if dims.len() != 4 {
            return Err(Error::Shape(format!(
                "k-space must be (coil, frame, row, col), got {dims:?}"
            )));
        }
        Self::from_vec(dims[0], dims[1], dims[2], dims[3], data)
    }
}

/// `A x = { M F(s_c x) }_c` with a centered orthonormal FFT per frame.
#[derive(Debug)]
pub struct EncodingOperator {
    mask: SamplingMask,
    coils: CoilSensitivities,
    fft: Fft2,
}

impl EncodingOperator {
    pub fn new(mask: SamplingMask, coils: CoilSensitivities) -> Result<Self> {
        let (h, w) = (mask.height(), mask.width());
        if coils.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "mask is {h}x{w} but coil maps are {:?}",
                coils.dims()
            )));
        }
        Ok(Self {
            mask,
            coils,
            fft: Fft2::new(h, w),
        })
    }

    /// Single unit coil.
    pub fn single_coil(mask: SamplingMask) -> Self {
        let coils = CoilSensitivities::unit(mask.height(), mask.width());
        Self::new(mask, coils).expect("matching dims")
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }
    pub fn coils(&self) -> &CoilSensitivities {
        &self.coils
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }
    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    fn check_image(&self, x: &ComplexGrid) -> Result<()> {
        if x.domain() != Domain::Image {
            return Err(Error::Shape("operator input must be image-space".into()));
        }
        if (x.height(), x.width()) != self.dims() {
            return Err(Error::Shape(format!(
                "image is {}x{}, operator is {:?}",
                x.height(),
                x.width(),
                self.dims()
            )));
        }
        Ok(())
    }

    fn check_kspace(&self, y: &KSpaceData) -> Result<()> {
        let (c, _, h, w) = y.shape();
        if c != self.coils.n_coils() || (h, w) != self.dims() {
            return Err(Error::Shape(format!(
                "k-space {:?} does not match operator ({} coils, {:?})",
                y.shape(),
                self.coils.n_coils(),
                self.dims()
            )));
        }
        Ok(())
    }

    fn apply_mask(&self, plane: &mut [Complex64]) {
        for (z, &k) in plane.iter_mut().zip(self.mask.keep()) {
            if !k {
                *z = Complex64::new(0.0, 0.0);
            }
        }
    }

    pub fn forward(&self, x: &ComplexGrid) -> Result<KSpaceData> {
        self.check_image(x)?;
        let (h, w) = self.dims();
        let n = h * w;
        let mut y = KSpaceData::zeros(self.coils.n_coils(), x.frames(), h, w);
        for c in 0..self.coils.n_coils() {
            let s = self.coils.map(c);
            let out = y.coil_mut(c);
            for k in 0..x.frames() {
                let plane = &mut out[k * n..(k + 1) * n];
                for ((dst, &xv), &sv) in plane.iter_mut().zip(x.plane(k)).zip(s) {
                    *dst = sv * xv;
                }
                self.fft.transform_plane(plane, rustfft::FftDirection::Forward);
                self.apply_mask(plane);
            }
        }
        Ok(y)
    }

    /// `sum_c conj(s_c) F^-1(M y_c)`.
    pub fn adjoint(&self, y: &KSpaceData) -> Result<ComplexGrid> {
        self.check_kspace(y)?;
        let (h, w) = self.dims();
        let n = h * w;
        let mut x = ComplexGrid::zeros(y.frames(), h, w, Domain::Image);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..self.coils.n_coils() {
            let s = self.coils.map(c);
            let yc = y.coil(c);
            for k in 0..y.frames() {
                buf.copy_from_slice(&yc[k * n..(k + 1) * n]);
                self.apply_mask(&mut buf);
                self.fft.transform_plane(&mut buf, rustfft::FftDirection::Inverse);
                for ((dst, &b), &sv) in x.plane_mut(k).iter_mut().zip(&buf).zip(s) {
                    *dst += sv.conj() * b;
                }
            }
        }
        Ok(x)
    }

    /// The zero-filled reconstruction: the adjoint applied to the data.
    pub fn zero_filled(&self, y: &KSpaceData) -> Result<ComplexGrid> {
        self.adjoint(y)
    }
}

pub fn forward(op: &EncodingOperator, x: &ComplexGrid) -> Result<KSpaceData> {
    op.forward(x)
}

pub fn adjoint(op: &EncodingOperator, y: &KSpaceData) -> Result<ComplexGrid> {
    op.adjoint(y)
}

pub fn zero_filled(op: &EncodingOperator, y: &KSpaceData) -> Result<ComplexGrid> {
    op.zero_filled(y)
}
