//! Measurement residuals, frequency-weighted residuals, the adaptive
//! back-projection step, and the DDNM / DPS consistency rules.

use std::str::FromStr;

use crate::denoiser::{analytic_gaussian_eps, x0_from_alpha_bar, Denoiser};
use crate::encoding::{EncodingOperator, KSpaceData};
use crate::error::{Error, Result};
use crate::grid::{from_pseudo_real, to_pseudo_real, ComplexGrid, PseudoRealStack};
use crate::schedule::NoiseSchedule;

/// Residual weights: `lambda_low` inside a centered `center` rectangle of
/// k-space, `lambda_high` elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyWeights {
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub center: (usize, usize),
}

impl Default for FrequencyWeights {
    fn default() -> Self {
        Self {
            lambda_low: 0.4,
            lambda_high: 0.6,
            center: (32, 32),
        }
    }
}

impl FrequencyWeights {
    pub fn uniform(lambda: f64) -> Self {
        Self {
            lambda_low: lambda,
            lambda_high: lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_low) || !ok(self.lambda_high) {
            return Err(Error::InvalidParameter(format!(
                "frequency weights must be finite and >= 0, got {} / {}",
                self.lambda_low, self.lambda_high
            )));
        }
        Ok(())
    }

    /// Same weights with the center shrunk to fit an `h x w` grid.
    pub fn clamped_to(&self, h: usize, w: usize) -> Self {
        Self {
            center: (self.center.0.min(h), self.center.1.min(w)),
            ..*self
        }
    }

    /// Row and column ranges of the low-frequency block.
    pub fn low_region(&self, h: usize, w: usize) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let (rh, rw) = self.center;
        if rh > h || rw > w {
            return Err(Error::InvalidParameter(format!(
                "center {rh}x{rw} does not fit a {h}x{w} grid"
            )));
        }
        let r0 = h / 2 - rh / 2;
        let c0 = w / 2 - rw / 2;
        Ok((r0..r0 + rh, c0..c0 + rw))
    }
}

/// How `omega` depends on the change in residual norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OmegaForm {
    /// `xi (1 + tanh(d) / 2)`, range `(xi/2, 3xi/2)`.
    #[default]
    HalfTanh,
    /// `xi (1 + tanh(d)) / 2`, range `(0, xi)`.
    FullRange,
}

impl FromStr for OmegaForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half-tanh" => Ok(Self::HalfTanh),
            "full-range" => Ok(Self::FullRange),
            other => Err(Error::Config(format!(
                "omega form must be half-tanh or full-range, got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for OmegaForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::HalfTanh => "half-tanh",
            Self::FullRange => "full-range",
        })
    }
}

/// Base scale and the residual norms of the previous and current steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyState {
    pub xi: f64,
    pub delta_prev: f64,
    pub delta_curr: f64,
}

impl ConsistencyState {
    pub fn new(xi: f64) -> Self {
        Self {
            xi,
            delta_prev: 0.0,
            delta_curr: 0.0,
        }
    }
}

/// `A x - y`, zero outside the mask.
pub fn residual(x: &ComplexGrid, y: &KSpaceData, op: &EncodingOperator) -> Result<KSpaceData> {
    let ax = op.forward(x)?;
    ax.sub(y)
}

/// Scales the low-frequency block by `lambda_low` and everything else by
/// `lambda_high`, per coil and frame.
pub fn freq_decompose(delta: &KSpaceData, w: &FrequencyWeights) -> Result<KSpaceData> {
    w.validate()?;
    let (coils, frames, h, wd) = delta.shape();
    let (rows, cols) = w.low_region(h, wd)?;
    let mut out = delta.clone();
    let n = h * wd;
    for c in 0..coils {
        let coil = out.coil_mut(c);
        for k in 0..frames {
            let plane = &mut coil[k * n..(k + 1) * n];
            for r in 0..h {
                for col in 0..wd {
                    let lam = if rows.contains(&r) && cols.contains(&col) {
                        w.lambda_low
                    } else {
                        w.lambda_high
                    };
                    plane[r * wd + col] *= lam;
                }
            }
        }
    }
    Ok(out)
}

pub fn adaptive_weight(st: &ConsistencyState, form: OmegaForm) -> f64 {
    let d = (st.delta_prev - st.delta_curr).tanh();
    match form {
        OmegaForm::HalfTanh => st.xi * (1.0 + d / 2.0),
        OmegaForm::FullRange => st.xi * (1.0 + d) / 2.0,
    }
}

/// Result of one back-projection.
#[derive(Debug, Clone)]
pub struct Backprojection {
    pub x: ComplexGrid,
    /// `||Delta_d||_2` of the input estimate.
    pub delta: f64,
    pub omega: f64,
}

/// `x0 - omega A^H(Delta_d)` with `omega` from the change in residual norm.
/// `st.delta_curr` is ignored and recomputed.
pub fn backproject_adaptive(
    x0_hat: &ComplexGrid,
    y: &KSpaceData,
    op: &EncodingOperator,
    w: &FrequencyWeights,
    st: &ConsistencyState,
    form: OmegaForm,
) -> Result<Backprojection> {
    let dd = freq_decompose(&residual(x0_hat, y, op)?, w)?;
    let delta = dd.norm();
    let omega = adaptive_weight(
        &ConsistencyState {
            delta_curr: delta,
            ..*st
        },
        form,
    );
    let x = x0_hat.axpy(-omega, &op.adjoint(&dd)?)?;
    Ok(Backprojection { x, delta, omega })
}

/// Back-projection with a fixed `omega`.
pub fn backproject_with_weight(
    x0_hat: &ComplexGrid,
    y: &KSpaceData,
    op: &EncodingOperator,
    w: &FrequencyWeights,
    omega: f64,
) -> Result<Backprojection> {
    let dd = freq_decompose(&residual(x0_hat, y, op)?, w)?;
    let delta = dd.norm();
    let x = x0_hat.axpy(-omega, &op.adjoint(&dd)?)?;
    Ok(Backprojection { x, delta, omega })
}

/// Null-space projection `x - A^H A x + A^H y`.
pub fn ddnm_project(x0_hat: &ComplexGrid, y: &KSpaceData, op: &EncodingOperator) -> Result<ComplexGrid> {
    let r = residual(x0_hat, y, op)?;
    x0_hat.sub(&op.adjoint(&r)?)
}

/// Gradient of `||y - A x0(x_t)||^2` with respect to `x_t`, through the
/// Tweedie map of a Gaussian-prior denoiser. Other denoisers are rejected.
pub fn dps_gradient<D: Denoiser + ?Sized>(
    den: &D,
    x_t: &PseudoRealStack,
    t: usize,
    y: &KSpaceData,
    op: &EncodingOperator,
    s: &NoiseSchedule,
) -> Result<PseudoRealStack> {
    let prior = den.gaussian_prior().ok_or_else(|| {
        Error::UnsupportedDenoiser("DPS needs a closed-form Gaussian prior".into())
    })?;
    let ab = s.alpha_bar(t)?;
    let eps = analytic_gaussian_eps(prior, x_t, t, s)?;
    let x0 = from_pseudo_real(&x0_from_alpha_bar(x_t, &eps, ab)?)?;
    let g = op.adjoint(&residual(&x0, y, op)?)?;
    let j = prior.tweedie_jacobian(ab);
    to_pseudo_real(&g).zip_map(&j, |gv, jv| 2.0 * gv * jv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticDenoiser, GaussianPrior, ZeroDenoiser};
    use crate::encoding::gen_coil_maps;
    use crate::grid::Domain;
    use crate::masks::{gen_gaussian_mask, SamplingMask};
    use crate::schedule::cosine_schedule;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ComplexGrid {
        ComplexGrid::from_fn(1, h, w, Domain::Image, |_, _, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn random_kspace(coils: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> KSpaceData {
        let data = (0..coils * h * w)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        KSpaceData::from_vec(coils, 1, h, w, data).unwrap()
    }

    fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> SamplingMask {
        let keep = (0..h * w).map(|_| rng.gen_bool(0.4)).collect();
        SamplingMask::new(h, w, keep, None, 2.5).unwrap()
    }

    fn multicoil_op(h: usize, w: usize, seed: u64) -> EncodingOperator {
        let mask = gen_gaussian_mask(h, w, 4.0, 1, seed).unwrap();
        EncodingOperator::new(mask, gen_coil_maps(4, h, w, seed).unwrap()).unwrap()
    }

    #[test]
    fn residual_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let op = multicoil_op(16, 16, 1);
        let gt = random_grid(16, 16, &mut rng);
        let y = op.forward(&gt).unwrap();
        assert_eq!(residual(&gt, &y, &op).unwrap().norm(), 0.0);
        let zero = ComplexGrid::zeros(1, 16, 16, Domain::Image);
        assert_eq!(residual(&zero, &y, &op).unwrap(), y.scale(-1.0));
        let x = random_grid(16, 16, &mut rng);
        let r = residual(&x, &y, &op).unwrap();
        let ax = op.forward(&x).unwrap();
        for ((a, b), c) in r.data().iter().zip(ax.data()).zip(y.data()) {
            assert!((a - (b - c)).norm() < 1e-12);
        }
    }

    #[test]
    fn freq_weights_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_kspace(2, 48, 40, &mut rng);
        let w = FrequencyWeights::uniform(1.0).clamped_to(48, 40);
        assert_eq!(freq_decompose(&d, &w).unwrap(), d);

        let w = FrequencyWeights::default().clamped_to(48, 40);
        let (rows, cols) = w.low_region(48, 40).unwrap();
        let mut inner = d.clone();
        for c in 0..2 {
            for (i, z) in inner.coil_mut(c).iter_mut().enumerate() {
                if !(rows.contains(&(i / 40)) && cols.contains(&(i % 40))) {
                    *z = Complex64::new(0.0, 0.0);
                }
            }
        }
        let out = freq_decompose(&inner, &w).unwrap();
        assert_eq!(out, inner.scale(0.4));
        let outer = d.sub(&inner).unwrap();
        let full = freq_decompose(&d, &w).unwrap();
        let expected = 0.16 * inner.norm_sqr() + 0.36 * outer.norm_sqr();
        assert!((full.norm_sqr() - expected).abs() < 1e-10 * expected);
    }

    #[test]
    fn low_region_is_centered_and_checked() {
        let w = FrequencyWeights::default();
        let (r, c) = w.low_region(64, 48).unwrap();
        assert_eq!((r, c), (16..48, 8..40));
        assert!(w.low_region(16, 64).is_err());
        let (r, _) = w.clamped_to(16, 64).low_region(16, 64).unwrap();
        assert_eq!(r, 0..16);
    }

    #[test]
    fn omega_law() {
        let st = |d: f64| ConsistencyState {
            xi: 3.0,
            delta_prev: d,
            delta_curr: 0.0,
        };
        assert_eq!(adaptive_weight(&st(0.0), OmegaForm::HalfTanh), 3.0);
        assert!((adaptive_weight(&st(25.0), OmegaForm::HalfTanh) - 4.5).abs() < 1e-6);
        assert!((adaptive_weight(&st(-25.0), OmegaForm::HalfTanh) - 1.5).abs() < 1e-6);
        assert_eq!(adaptive_weight(&st(0.0), OmegaForm::FullRange), 1.5);
        assert!(adaptive_weight(&st(-25.0), OmegaForm::FullRange) < 1e-6);
        assert_eq!("full-range".parse::<OmegaForm>().unwrap(), OmegaForm::FullRange);
    }

    #[test]
    fn backprojection_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = multicoil_op(32, 32, 4);
        let gt = random_grid(32, 32, &mut rng);
        let y = op.forward(&gt).unwrap();
        let w = FrequencyWeights::default();
        let st = ConsistencyState::new(3.0);
        let bp = backproject_adaptive(&gt, &y, &op, &w, &st, OmegaForm::HalfTanh).unwrap();
        assert_eq!(bp.delta, 0.0);
        assert_eq!(bp.x, gt);

        let empty = EncodingOperator::single_coil(SamplingMask::empty(32, 32));
        let x = random_grid(32, 32, &mut rng);
        let y0 = KSpaceData::zeros(1, 1, 32, 32);
        let bp = backproject_adaptive(&x, &y0, &empty, &w, &st, OmegaForm::HalfTanh).unwrap();
        assert_eq!(bp.x, x);
    }

    #[test]
    fn full_mask_unit_step_replaces_kspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = EncodingOperator::single_coil(SamplingMask::full(16, 16));
        let gt = random_grid(16, 16, &mut rng);
        let y = op.forward(&gt).unwrap();
        let x = random_grid(16, 16, &mut rng);
        let w = FrequencyWeights::uniform(1.0).clamped_to(16, 16);
        let bp = backproject_with_weight(&x, &y, &op, &w, 1.0).unwrap();
        let k = op.forward(&bp.x).unwrap();
        assert!(k.sub(&y).unwrap().norm() < 1e-10 * y.norm());
    }

    #[test]
    fn ddnm_replaces_measured_and_keeps_unmeasured() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (h, w) in [(8, 8), (16, 24), (32, 32)] {
            let mask = random_mask(h, w, &mut rng);
            let op = EncodingOperator::single_coil(mask.clone());
            let gt = random_grid(h, w, &mut rng);
            let y = op.forward(&gt).unwrap();
            let x = random_grid(h, w, &mut rng);
            let out = ddnm_project(&x, &y, &op).unwrap();
            let full = EncodingOperator::single_coil(SamplingMask::full(h, w));
            let ko = full.forward(&out).unwrap();
            let kx = full.forward(&x).unwrap();
            for i in 0..h * w {
                let expected = if mask.keep()[i] { y.data()[i] } else { kx.data()[i] };
                assert!((ko.data()[i] - expected).norm() < 1e-10);
            }
            // fixed point
            let yx = op.forward(&x).unwrap();
            let same = ddnm_project(&x, &yx, &op).unwrap();
            assert!(same.sub(&x).unwrap().norm() < 1e-10);
        }
        let op = EncodingOperator::single_coil(SamplingMask::full(16, 16));
        let gt = random_grid(16, 16, &mut rng);
        let out = ddnm_project(&random_grid(16, 16, &mut rng), &op.forward(&gt).unwrap(), &op).unwrap();
        assert!(out.sub(&gt).unwrap().norm() < 1e-6);
    }

    fn gaussian_den(h: usize, w: usize, seed: u64) -> AnalyticDenoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = PseudoRealStack::from_vec(2, h, w, (0..2 * h * w).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let var = PseudoRealStack::from_vec(2, h, w, (0..2 * h * w).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
        AnalyticDenoiser::new(GaussianPrior::new(mean, var).unwrap(), cosine_schedule(1000).unwrap())
    }

    #[test]
    fn dps_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let den = gaussian_den(8, 8, 8);
        let s = den.schedule().clone();
        let op = multicoil_op(8, 8, 9);
        let y = random_kspace(4, 8, 8, &mut rng);
        let y = op.forward(&op.adjoint(&y).unwrap()).unwrap();
        let x_t = PseudoRealStack::from_vec(2, 8, 8, (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let t = 400;
        let g = dps_gradient(&den, &x_t, t, &y, &op, &s).unwrap();
        let objective = |x: &PseudoRealStack| {
            let eps = den.eps(x, t).unwrap();
            let x0 = from_pseudo_real(&x0_from_alpha_bar(x, &eps, s.alpha_bar(t).unwrap()).unwrap()).unwrap();
            residual(&x0, &y, &op).unwrap().norm_sqr()
        };
        let h = 1e-5;
        for i in [0, 13, 64, 100, 127] {
            let mut p = x_t.clone();
            p.data_mut()[i] += h;
            let mut m = x_t.clone();
            m.data_mut()[i] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            let a = g.data()[i];
            assert!((fd - a).abs() <= 1e-4 * a.abs().max(1e-3), "{i}: {fd} vs {a}");
        }
    }

    #[test]
    fn dps_degenerate_and_unsupported() {
        let den = gaussian_den(8, 8, 1);
        let s = den.schedule().clone();
        let x_t = den.prior().mean().clone();
        let empty = EncodingOperator::single_coil(SamplingMask::empty(8, 8));
        let y = KSpaceData::zeros(1, 1, 8, 8);
        let g = dps_gradient(&den, &x_t, 10, &y, &empty, &s).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            dps_gradient(&ZeroDenoiser, &x_t, 10, &y, &empty, &s),
            Err(Error::UnsupportedDenoiser(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn residual_and_decompose_are_linear(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let op = multicoil_op(16, 16, seed);
            let y = op.forward(&random_grid(16, 16, &mut rng)).unwrap();
            let (a, b) = (random_grid(16, 16, &mut rng), random_grid(16, 16, &mut rng));
            let zero = ComplexGrid::zeros(1, 16, 16, Domain::Image);
            // r(a + b) - r(0) = (r(a) - r(0)) + (r(b) - r(0))
            let lhs = residual(&a.add(&b).unwrap(), &y, &op).unwrap().sub(&residual(&zero, &y, &op).unwrap()).unwrap();
            let rhs = residual(&a, &y, &op).unwrap().add(&residual(&b, &y, &op).unwrap()).unwrap().add(&y.scale(2.0)).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().norm() < 1e-10);

            let w = FrequencyWeights::default().clamped_to(16, 16);
            let (d1, d2) = (random_kspace(2, 16, 16, &mut rng), random_kspace(2, 16, 16, &mut rng));
            let sum = freq_decompose(&d1.add(&d2).unwrap(), &w).unwrap();
            let parts = freq_decompose(&d1, &w).unwrap().add(&freq_decompose(&d2, &w).unwrap()).unwrap();
            prop_assert!(sum.sub(&parts).unwrap().norm() < 1e-10);
        }

        #[test]
        fn omega_stays_in_band(dp in 0.0f64..1e3, dc in 0.0f64..1e3, xi in 0.01f64..10.0) {
            let w = adaptive_weight(&ConsistencyState { xi, delta_prev: dp, delta_curr: dc }, OmegaForm::HalfTanh);
            prop_assert!(w >= xi / 2.0 && w <= 1.5 * xi);
        }

        #[test]
        fn unit_coil_backprojection_does_not_grow_residual(seed in 0u64..1000, omega in 0.05f64..1.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let op = EncodingOperator::single_coil(random_mask(16, 16, &mut rng));
            let y = op.forward(&random_grid(16, 16, &mut rng)).unwrap();
            let x = random_grid(16, 16, &mut rng);
            let w = FrequencyWeights::uniform(1.0).clamped_to(16, 16);
            let out = backproject_with_weight(&x, &y, &op, &w, omega).unwrap();
            let before = residual(&x, &y, &op).unwrap().norm();
            let after = residual(&out.x, &y, &op).unwrap().norm();
            prop_assert!(after <= before + 1e-12);
        }
    }
}
