//! Noise-prediction models `eps(x_t, t)` and the algebra around them.

mod layers;
mod precond;
mod tiny;
mod train;
mod weights;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use precond::Preconditioner;
pub use tiny::{tiny_denoiser_eps, TinyDenoiser, TinyDenoiserWeights, TinyUNetConfig};
pub use train::{
    train_tiny_denoiser, train_with_progress, Optimizer, TimestepSampling, TrainConfig, TrainReport,
};
pub use weights::{WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::error::{Error, Result};
use crate::grid::PseudoRealStack;
use crate::schedule::NoiseSchedule;

/// A shape-preserving noise predictor. Implementations must be pure and
/// callable from several threads.
pub trait Denoiser: Send + Sync {
    fn eps(&self, x_t: &PseudoRealStack, t: usize) -> Result<PseudoRealStack>;

    /// Closed-form Gaussian prior behind this denoiser, if any. Only such
    /// denoisers support the DPS gradient.
    fn gaussian_prior(&self) -> Option<&GaussianPrior> {
        None
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn eps(&self, x_t: &PseudoRealStack, t: usize) -> Result<PseudoRealStack> {
        (**self).eps(x_t, t)
    }
    fn gaussian_prior(&self) -> Option<&GaussianPrior> {
        (**self).gaussian_prior()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn eps(&self, x_t: &PseudoRealStack, t: usize) -> Result<PseudoRealStack> {
        (**self).eps(x_t, t)
    }
    fn gaussian_prior(&self) -> Option<&GaussianPrior> {
        (**self).gaussian_prior()
    }
}

/// Tweedie estimate `(x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
pub fn estimate_x0(
    x_t: &PseudoRealStack,
    t: usize,
    eps_hat: &PseudoRealStack,
    s: &NoiseSchedule,
) -> Result<PseudoRealStack> {
    let ab = s.alpha_bar(t)?;
    x0_from_alpha_bar(x_t, eps_hat, ab)
}

pub(crate) fn x0_from_alpha_bar(
    x_t: &PseudoRealStack,
    eps_hat: &PseudoRealStack,
    ab: f64,
) -> Result<PseudoRealStack> {
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
}

/// `score = -eps / sqrt(1 - ab_t)`.
pub fn score_from_eps(
    eps_hat: &PseudoRealStack,
    t: usize,
    s: &NoiseSchedule,
) -> Result<PseudoRealStack> {
    let ab = s.alpha_bar(t)?;
    if ab >= 1.0 {
        return Err(Error::DegenerateInput(format!(
            "alpha_bar({t}) = 1, score is undefined"
        )));
    }
    let k = -1.0 / (1.0 - ab).sqrt();
    Ok(eps_hat.map(|e| e * k))
}

/// Inverse of [`score_from_eps`].
pub fn eps_from_score(
    score: &PseudoRealStack,
    t: usize,
    s: &NoiseSchedule,
) -> Result<PseudoRealStack> {
    let k = -(1.0 - s.alpha_bar(t)?).sqrt();
    Ok(score.map(|v| v * k))
}

/// Independent Gaussian prior over pseudo-real elements.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: PseudoRealStack,
    var: PseudoRealStack,
}

impl GaussianPrior {
    pub fn new(mean: PseudoRealStack, var: PseudoRealStack) -> Result<Self> {
        mean.check_same_shape(&var)?;
        if let Some(v) = var.data().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "prior variance must be positive, found {v}"
            )));
        }
        Ok(Self { mean, var })
    }

    /// Same variance everywhere.
    pub fn isotropic(mean: PseudoRealStack, var: f64) -> Result<Self> {
        let v = mean.map(|_| var);
        Self::new(mean, v)
    }

    /// Empirical per-element mean and variance of a dataset, with `floor`
    /// added to every variance.
    pub fn fit(data: &[PseudoRealStack], floor: f64) -> Result<Self> {
        let first = data.first().ok_or(Error::EmptyDataset)?;
        let n = data.len() as f64;
        let mut mean = PseudoRealStack::zeros(first.channels(), first.height(), first.width());
        for d in data {
            d.check_same_shape(first)?;
            for (m, v) in mean.data_mut().iter_mut().zip(d.data()) {
                *m += v / n;
            }
        }
        let mut var = mean.map(|_| floor);
        for d in data {
            for ((s, v), m) in var.data_mut().iter_mut().zip(d.data()).zip(mean.data()) {
                *s += (v - m).powi(2) / n;
            }
        }
        Self::new(mean, var)
    }

    pub fn mean(&self) -> &PseudoRealStack {
        &self.mean
    }
    pub fn var(&self) -> &PseudoRealStack {
        &self.var
    }

    /// Derivative of the Tweedie estimate with respect to `x_t`, per
    /// element: `sqrt(ab) v / (ab v + 1 - ab)`.
    pub fn tweedie_jacobian(&self, ab: f64) -> PseudoRealStack {
        self.var.map(|v| ab.sqrt() * v / (ab * v + 1.0 - ab))
    }

    /// Log-density of the noised marginal `N(sqrt(ab) m, ab v + 1 - ab)` up
    /// to a constant.
    pub fn log_marginal(&self, x_t: &PseudoRealStack, ab: f64) -> Result<f64> {
        x_t.check_same_shape(&self.mean)?;
        Ok(x_t
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(self.var.data())
            .map(|((x, m), v)| {
                let s2 = ab * v + 1.0 - ab;
                -0.5 * (x - ab.sqrt() * m).powi(2) / s2 - 0.5 * s2.ln()
            })
            .sum())
    }
}

/// Exact noise prediction for a Gaussian prior: the marginal score at `x_t`,
/// converted with `eps = -sqrt(1 - ab) score`.
pub fn analytic_gaussian_eps(
    prior: &GaussianPrior,
    x_t: &PseudoRealStack,
    t: usize,
    s: &NoiseSchedule,
) -> Result<PseudoRealStack> {
    let ab = s.alpha_bar(t)?;
    x_t.check_same_shape(&prior.mean)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x_t.clone();
    for ((o, m), v) in out
        .data_mut()
        .iter_mut()
        .zip(prior.mean.data())
        .zip(prior.var.data())
    {
        let score = -(*o - sa * m) / (ab * v + 1.0 - ab);
        *o = -sb * score;
    }
    Ok(out)
}

/// Denoiser backed by a known Gaussian prior.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    prior: GaussianPrior,
    schedule: NoiseSchedule,
}

impl AnalyticDenoiser {
    pub fn new(prior: GaussianPrior, schedule: NoiseSchedule) -> Self {
        Self { prior, schedule }
    }
    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl Denoiser for AnalyticDenoiser {
    fn eps(&self, x_t: &PseudoRealStack, t: usize) -> Result<PseudoRealStack> {
        analytic_gaussian_eps(&self.prior, x_t, t, &self.schedule)
    }

    fn gaussian_prior(&self) -> Option<&GaussianPrior> {
        Some(&self.prior)
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn eps(&self, x_t: &PseudoRealStack, _t: usize) -> Result<PseudoRealStack> {
        Ok(x_t.map(|_| 0.0))
    }
}

/// Wraps a denoiser and counts its evaluations.
#[derive(Debug)]
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
    pub fn into_inner(self) -> D {
        self.inner
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn eps(&self, x_t: &PseudoRealStack, t: usize) -> Result<PseudoRealStack> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.eps(x_t, t)
    }
    fn gaussian_prior(&self) -> Option<&GaussianPrior> {
        self.inner.gaussian_prior()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::cosine_schedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack(vals: Vec<f64>) -> PseudoRealStack {
        let n = vals.len() / 2;
        PseudoRealStack::from_vec(2, 1, n, vals).unwrap()
    }

    fn random_stack(n: usize, rng: &mut ChaCha8Rng) -> PseudoRealStack {
        stack((0..2 * n).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    /// A two-step schedule with a chosen alpha_bar at t = 1.
    fn schedule_with_alpha_bar(ab1: f64) -> NoiseSchedule {
        // beta_0 tiny, beta_1 chosen so that (1 - b0)(1 - b1) = ab1
        let b0 = 1e-12;
        NoiseSchedule::from_betas(vec![b0, 1.0 - ab1 / (1.0 - b0)]).unwrap()
    }

    #[test]
    fn x0_cases() {
        let s = schedule_with_alpha_bar(0.25);
        let x = stack(vec![1.0, 1.0]);
        let e = stack(vec![0.5, 0.5]);
        let x0 = estimate_x0(&x, 1, &e, &s).unwrap();
        let expected = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        assert!((x0.data()[0] - expected).abs() < 1e-9);
        assert!((expected - 1.13397).abs() < 1e-5);

        let zero = stack(vec![0.0, 0.0]);
        let x0 = estimate_x0(&x, 1, &zero, &s).unwrap();
        assert!((x0.data()[0] - 2.0).abs() < 1e-9);

        // alpha_bar -> 1: eps contributes nothing
        let x0 = x0_from_alpha_bar(&x, &e, 1.0).unwrap();
        assert_eq!(x0, x);
        assert!(estimate_x0(&x, 2, &e, &s).is_err());
    }

    #[test]
    fn score_cases() {
        let s = schedule_with_alpha_bar(0.75);
        let sc = score_from_eps(&stack(vec![1.0, 0.0]), 1, &s).unwrap();
        assert!((sc.data()[0] + 2.0).abs() < 1e-9);
        assert_eq!(sc.data()[1], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cosine_schedule(1000).unwrap();
        for t in [0, 10, 500, 999] {
            let e = random_stack(8, &mut rng);
            let back = eps_from_score(&score_from_eps(&e, t, &c).unwrap(), t, &c).unwrap();
            for (a, b) in back.data().iter().zip(e.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_degenerate_at_clean_end() {
        let s = NoiseSchedule::from_betas(vec![1e-300, 0.5]).unwrap();
        assert!(matches!(
            score_from_eps(&stack(vec![1.0, 1.0]), 0, &s),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn standard_normal_prior_eps() {
        let s = cosine_schedule(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = GaussianPrior::isotropic(stack(vec![0.0; 16]), 1.0).unwrap();
        for t in [0, 300, 999] {
            let x = random_stack(8, &mut rng);
            let e = analytic_gaussian_eps(&prior, &x, t, &s).unwrap();
            let k = (1.0 - s.alpha_bars()[t]).sqrt();
            for (a, b) in e.data().iter().zip(x.data()) {
                assert!((a - k * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eps_vanishes_at_scaled_mean() {
        let s = cosine_schedule(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean = random_stack(8, &mut rng);
        let var = random_stack(8, &mut rng).map(|v| v.abs() + 0.1);
        let prior = GaussianPrior::new(mean.clone(), var).unwrap();
        let ab: f64 = s.alpha_bars()[400];
        let x = mean.map(|m| ab.sqrt() * m);
        let e = analytic_gaussian_eps(&prior, &x, 400, &s).unwrap();
        assert!(e.data().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn tweedie_matches_gaussian_posterior_mean() {
        // For x0 ~ N(m, v), x_t = sqrt(ab) x0 + sqrt(1 - ab) n:
        // E[x0 | x_t] = m + v sqrt(ab) (x_t - sqrt(ab) m) / (ab v + 1 - ab).
        let s = cosine_schedule(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mean = random_stack(10, &mut rng);
        let var = random_stack(10, &mut rng).map(|v| v.abs() + 0.05);
        let prior = GaussianPrior::new(mean.clone(), var.clone()).unwrap();
        for t in [0, 1, 50, 500, 900, 999] {
            let ab: f64 = s.alpha_bars()[t];
            let x = random_stack(10, &mut rng);
            let e = analytic_gaussian_eps(&prior, &x, t, &s).unwrap();
            let x0 = estimate_x0(&x, t, &e, &s).unwrap();
            for i in 0..x.len() {
                let (m, v, xt) = (mean.data()[i], var.data()[i], x.data()[i]);
                let post = m + v * ab.sqrt() * (xt - ab.sqrt() * m) / (ab * v + 1.0 - ab);
                assert!((x0.data()[i] - post).abs() < 1e-10 * post.abs().max(1.0), "t={t}");
            }
        }
    }

    #[test]
    fn score_matches_finite_difference_of_log_density() {
        let s = cosine_schedule(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean = random_stack(6, &mut rng);
        let var = random_stack(6, &mut rng).map(|v| v.abs() + 0.1);
        let prior = GaussianPrior::new(mean, var).unwrap();
        for _ in 0..20 {
            let t = rng.gen_range(0..1000);
            let ab = s.alpha_bars()[t];
            let x = random_stack(6, &mut rng);
            let e = analytic_gaussian_eps(&prior, &x, t, &s).unwrap();
            let score = score_from_eps(&e, t, &s).unwrap();
            let h = 1e-5;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (prior.log_marginal(&xp, ab).unwrap() - prior.log_marginal(&xm, ab).unwrap())
                    / (2.0 * h);
                let an = score.data()[i];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-2), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn fit_recovers_moments() {
        let data = vec![stack(vec![1.0, 3.0]), stack(vec![3.0, 3.0])];
        let p = GaussianPrior::fit(&data, 0.5).unwrap();
        assert_eq!(p.mean().data(), &[2.0, 3.0]);
        assert_eq!(p.var().data(), &[1.5, 0.5]);
        assert!(matches!(GaussianPrior::fit(&[], 0.1), Err(Error::EmptyDataset)));
    }

    #[test]
    fn counting_wrapper_counts() {
        let d = CountingDenoiser::new(ZeroDenoiser);
        let x = stack(vec![1.0, 2.0]);
        for t in 0..7 {
            d.eps(&x, t).unwrap();
        }
        assert_eq!(d.calls(), 7);
        d.reset();
        assert_eq!(d.calls(), 0);
    }
}
