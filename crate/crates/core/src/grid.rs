//! Complex image / k-space grids, the pseudo-real channel packing fed to the
//! denoiser, and intensity normalization.
//!
//! Storage is frame-major, row-major within a frame.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Image,
    KSpace,
}

impl Domain {
    pub fn flipped(self) -> Self {
        match self {
            Domain::Image => Domain::KSpace,
            Domain::KSpace => Domain::Image,
        }
    }
}

/// A stack of `frames` complex planes of size `h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    frames: usize,
    h: usize,
    w: usize,
    domain: Domain,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn zeros(frames: usize, h: usize, w: usize, domain: Domain) -> Self {
        Self {
            frames,
            h,
            w,
            domain,
            data: vec![Complex64::new(0.0, 0.0); frames * h * w],
        }
    }

    pub fn from_vec(
        frames: usize,
        h: usize,
        w: usize,
        domain: Domain,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if frames == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty grid {frames}x{h}x{w}")));
        }
        if data.len() != frames * h * w {
            return Err(Error::Shape(format!(
                "expected {} elements for {frames}x{h}x{w}, got {}",
                frames * h * w,
                data.len()
            )));
        }
        Ok(Self {
            frames,
            h,
            w,
            domain,
            data,
        })
    }

    pub fn from_fn(
        frames: usize,
        h: usize,
        w: usize,
        domain: Domain,
        mut f: impl FnMut(usize, usize, usize) -> Complex64,
    ) -> Self {
        let mut data = Vec::with_capacity(frames * h * w);
        for k in 0..frames {
            for r in 0..h {
                for c in 0..w {
                    data.push(f(k, r, c));
                }
            }
        }
        Self {
            frames,
            h,
            w,
            domain,
            data,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.h, self.w)
    }
    pub fn domain(&self) -> Domain {
        self.domain
    }
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }
    pub fn plane(&self, frame: usize) -> &[Complex64] {
        let n = self.h * self.w;
        &self.data[frame * n..(frame + 1) * n]
    }
    pub fn plane_mut(&mut self, frame: usize) -> &mut [Complex64] {
        let n = self.h * self.w;
        &mut self.data[frame * n..(frame + 1) * n]
    }

    pub fn get(&self, frame: usize, row: usize, col: usize) -> Complex64 {
        assert!(frame < self.frames && row < self.h && col < self.w);
        self.data[(frame * self.h + row) * self.w + col]
    }

    pub fn set(&mut self, frame: usize, row: usize, col: usize, v: Complex64) {
        assert!(frame < self.frames && row < self.h && col < self.w);
        self.data[(frame * self.h + row) * self.w + col] = v;
    }

    pub(crate) fn set_domain(&mut self, domain: Domain) {
        self.domain = domain;
    }

    pub fn same_shape(&self, other: &ComplexGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &ComplexGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        self.with_data(self.data.iter().map(|&z| f(z)).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    /// `self + a * other`, elementwise.
    pub fn axpy(&self, a: f64, other: &ComplexGrid) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| x + y * a)
                .collect(),
        ))
    }

    pub fn sub(&self, other: &ComplexGrid) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    pub fn add(&self, other: &ComplexGrid) -> Result<Self> {
        self.axpy(1.0, other)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Hermitian inner product `<self, other> = sum conj(self) * other`.
    pub fn inner(&self, other: &ComplexGrid) -> Result<Complex64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Largest absolute real or imaginary component.
    pub fn max_component(&self) -> f64 {
        self.data
            .iter()
            .map(|z| z.re.abs().max(z.im.abs()))
            .fold(0.0, f64::max)
    }

    /// Magnitude of frame `frame` as a row-major real image.
    pub fn magnitude(&self, frame: usize) -> Vec<f64> {
        self.plane(frame).iter().map(|z| z.norm()).collect()
    }
}

impl ComplexGrid {
    pub(crate) fn with_data(&self, data: Vec<Complex64>) -> Self {
        Self {
            frames: self.frames,
            h: self.h,
            w: self.w,
            domain: self.domain,
            data,
        }
    }
}

/// Real channels `(2 * frames, h, w)`: channel `2k` is the real part of frame
/// `k`, channel `2k + 1` its imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRealStack {
    channels: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl PseudoRealStack {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    pub fn from_vec(channels: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(Error::Shape(format!(
                "expected {} values for {channels}x{h}x{w}, got {}",
                channels * h * w,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            h,
            w,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.h, self.w)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_same_shape(&self, other: &PseudoRealStack) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            channels: self.channels,
            h: self.h,
            w: self.w,
        }
    }

    /// Elementwise `f(self_i, other_i)`.
    pub fn zip_map(&self, other: &PseudoRealStack, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            channels: self.channels,
            h: self.h,
            w: self.w,
        })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn to_pseudo_real(g: &ComplexGrid) -> PseudoRealStack {
    let n = g.h * g.w;
    let mut data = vec![0.0; 2 * g.frames * n];
    for k in 0..g.frames {
        let plane = g.plane(k);
        let (re, im) = data[2 * k * n..2 * (k + 1) * n].split_at_mut(n);
        for (i, z) in plane.iter().enumerate() {
            re[i] = z.re;
            im[i] = z.im;
        }
    }
    PseudoRealStack {
        channels: 2 * g.frames,
        h: g.h,
        w: g.w,
        data,
    }
}

/// Inverse of [`to_pseudo_real`]; the result is tagged image-space.
pub fn from_pseudo_real(s: &PseudoRealStack) -> Result<ComplexGrid> {
    if s.channels == 0 || s.channels % 2 != 0 {
        return Err(Error::MalformedStack(format!(
            "channel count {} is not a positive even number",
            s.channels
        )));
    }
    let frames = s.channels / 2;
    let n = s.h * s.w;
    let mut data = Vec::with_capacity(frames * n);
    for k in 0..frames {
        let re = &s.data[2 * k * n..(2 * k + 1) * n];
        let im = &s.data[(2 * k + 1) * n..(2 * k + 2) * n];
        data.extend(re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)));
    }
    ComplexGrid::from_vec(frames, s.h, s.w, Domain::Image, data)
}

/// Scalars needed to undo [`normalize`]: the image was divided by
/// `std_scale` and then by `max_magnitude`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub std_scale: f64,
    pub max_magnitude: f64,
}

impl NormParams {
    pub const IDENTITY: NormParams = NormParams {
        std_scale: 1.0,
        max_magnitude: 1.0,
    };

    /// Total factor mapping normalized values back to the original scale.
    pub fn factor(&self) -> f64 {
        self.std_scale * self.max_magnitude
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.std_scale) && ok(self.max_magnitude) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "normalization params must be positive and finite, got {self:?}"
            )))
        }
    }
}

/// Standardize to unit standard deviation over all pseudo-real elements, then
/// divide by the largest resulting pseudo-real magnitude so every value lies
/// in `[-1, 1]`.
pub fn normalize(g: &ComplexGrid) -> Result<(ComplexGrid, NormParams)> {
    let n = (2 * g.data.len()) as f64;
    let mean = g.data.iter().map(|z| z.re + z.im).sum::<f64>() / n;
    let var = g
        .data
        .iter()
        .map(|z| (z.re - mean).powi(2) + (z.im - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "pseudo-real standard deviation is {std}"
        )));
    }
    let standardized = g.scale(1.0 / std);
    let max_mag = standardized.max_component();
    if !(max_mag > 0.0) || !max_mag.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "maximum magnitude is {max_mag}"
        )));
    }
    let params = NormParams {
        std_scale: std,
        max_magnitude: max_mag,
    };
    Ok((standardized.scale(1.0 / max_mag), params))
}

pub fn denormalize(g: &ComplexGrid, p: NormParams) -> Result<ComplexGrid> {
    p.validate()?;
    Ok(g.scale(p.max_magnitude).scale(p.std_scale))
}

impl ComplexGrid {
    /// CXG1 tensor with dims `(frame, row, col)`. The domain tag is not
    /// stored; loaded grids are image-space.
    pub fn to_tensor(&self) -> crate::cxg::Tensor {
        crate::cxg::Tensor::complex(vec![self.frames, self.h, self.w], self.data.clone())
    }

    pub fn from_tensor(t: crate::cxg::Tensor) -> Result<Self> {
        let (dims, data) = t.into_complex()?;
        match dims[..] {
            [h, w] => Self::from_vec(1, h, w, Domain::Image, data),
            [f, h, w] => Self::from_vec(f, h, w, Domain::Image, data),
            _ => Err(Error::Format(format!(
                "image tensors have 2 or 3 dims, got {dims:?}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn packs_real_and_imaginary_inputs() {
        let g = ComplexGrid::from_fn(1, 3, 4, Domain::Image, |_, _, _| c(1.0, 0.0));
        let s = to_pseudo_real(&g);
        assert_eq!(s.channels(), 2);
        assert!(s.data()[..12].iter().all(|&v| v == 1.0));
        assert!(s.data()[12..].iter().all(|&v| v == 0.0));

        let g = ComplexGrid::from_fn(1, 3, 4, Domain::Image, |_, _, _| c(0.0, 1.0));
        let s = to_pseudo_real(&g);
        assert!(s.data()[..12].iter().all(|&v| v == 0.0));
        assert!(s.data()[12..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unpacks_simple_stacks() {
        let mut data = vec![1.0; 8];
        data.extend(vec![0.0; 8]);
        let g = from_pseudo_real(&PseudoRealStack::from_vec(2, 2, 4, data).unwrap()).unwrap();
        assert!(g.data().iter().all(|&z| z == c(1.0, 0.0)));

        let g = from_pseudo_real(&PseudoRealStack::zeros(2, 2, 4)).unwrap();
        assert!(g.data().iter().all(|&z| z == c(0.0, 0.0)));
    }

    #[test]
    fn odd_channel_count_is_malformed() {
        let s = PseudoRealStack::zeros(3, 2, 2);
        assert!(matches!(from_pseudo_real(&s), Err(Error::MalformedStack(_))));
    }

    #[test]
    fn constant_grid_is_degenerate() {
        let g = ComplexGrid::from_fn(1, 4, 4, Domain::Image, |_, _, _| c(2.5, 2.5));
        assert!(matches!(normalize(&g), Err(Error::DegenerateInput(_))));
        let z = ComplexGrid::zeros(1, 4, 4, Domain::Image);
        assert!(matches!(normalize(&z), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn normalized_grid_is_left_alone() {
        // pseudo-real values are all +-1: mean 0, std 1, max 1
        let g = ComplexGrid::from_fn(1, 4, 4, Domain::Image, |_, r, col| {
            c(
                if (r + col) % 2 == 0 { 1.0 } else { -1.0 },
                if r % 2 == 0 { 1.0 } else { -1.0 },
            )
        });
        let (n, p) = normalize(&g).unwrap();
        assert_eq!(p, NormParams::IDENTITY);
        assert_eq!(n, g);
    }

    #[test]
    fn identity_params_do_nothing() {
        let g = ComplexGrid::from_fn(2, 3, 3, Domain::Image, |k, r, col| {
            c(k as f64 + r as f64, col as f64 - 1.0)
        });
        assert_eq!(denormalize(&g, NormParams::IDENTITY).unwrap(), g);
        let z = ComplexGrid::zeros(1, 3, 3, Domain::Image);
        let p = NormParams {
            std_scale: 3.0,
            max_magnitude: 0.25,
        };
        assert_eq!(denormalize(&z, p).unwrap(), z);
    }

    #[test]
    fn rejects_non_positive_params() {
        let g = ComplexGrid::zeros(1, 2, 2, Domain::Image);
        for p in [
            NormParams {
                std_scale: 0.0,
                max_magnitude: 1.0,
            },
            NormParams {
                std_scale: 1.0,
                max_magnitude: -2.0,
            },
        ] {
            assert!(matches!(denormalize(&g, p), Err(Error::InvalidParameter(_))));
        }
    }

    fn grid_strategy() -> impl Strategy<Value = ComplexGrid> {
        (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(f, h, w)| {
            prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), f * h * w).prop_map(move |v| {
                ComplexGrid::from_vec(
                    f,
                    h,
                    w,
                    Domain::Image,
                    v.into_iter().map(|(a, b)| c(a, b)).collect(),
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn pseudo_real_round_trip_is_exact(g in grid_strategy()) {
            let s = to_pseudo_real(&g);
            prop_assert_eq!(s.channels(), 2 * g.frames());
            let back = from_pseudo_real(&s).unwrap();
            prop_assert_eq!(back.data(), g.data());
            prop_assert_eq!(to_pseudo_real(&back), s);
        }

        #[test]
        fn normalize_bounds_and_round_trip(g in grid_strategy()) {
            prop_assume!(g.data().iter().any(|z| z.norm() > 1e-3));
            let Ok((n, p)) = normalize(&g) else { return Ok(()); };
            let s = to_pseudo_real(&n);
            prop_assert!(s.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
            prop_assert!((n.max_component() - 1.0).abs() < 1e-12);
            let back = denormalize(&n, p).unwrap();
            let err = back.sub(&g).unwrap().norm() / g.norm();
            prop_assert!(err < 1e-6);
        }
    }
}
