//! Reverse DDIM sampling, DDIM inversion (plain and noise-perturbed), the
//! full inversion + adaptive back-projection reconstruction loop, and the
//! DDNM baseline.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::consistency::{
    backproject_adaptive, residual, ConsistencyState, FrequencyWeights, OmegaForm,
};
use crate::denoiser::{x0_from_alpha_bar, Denoiser};
use crate::encoding::{EncodingOperator, KSpaceData};
use crate::error::{Error, Result};
use crate::grid::{
    denormalize, from_pseudo_real, normalize, to_pseudo_real, ComplexGrid, NormParams,
    PseudoRealStack,
};
use crate::schedule::{ascending_plan, uniform_plan, NoiseSchedule};

/// How the stochastic term of the reverse update is sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaForm {
    /// `eta sqrt(beta_t (1 - ab_prev) / (1 - ab_t))`.
    #[default]
    Standard,
    /// `eta beta_t (1 - ab_prev) / (1 - ab_t)`, no square root.
    Literal,
}

impl FromStr for SigmaForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!(
                "sigma form must be standard or literal, got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for SigmaForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub reverse_steps: usize,
    pub inversion_steps: usize,
    pub eta: f64,
    pub inversion_noise_scale: f64,
    /// `None` means the last schedule index.
    pub t_start: Option<usize>,
    pub seed: u64,
    pub xi: f64,
    pub weights: FrequencyWeights,
    pub omega_form: OmegaForm,
    pub sigma_form: SigmaForm,
    pub backprojection: bool,
    /// Clamp every pseudo-real element of the denoiser's clean estimate to
    /// `[-c, c]` before data consistency. Guards against blow-up at the
    /// noisy end of the schedule where the estimate divides by a tiny
    /// `sqrt(alpha_bar)`.
    pub x0_clip: Option<f64>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            reverse_steps: 200,
            inversion_steps: 25,
            eta: 0.0,
            inversion_noise_scale: 1.0,
            t_start: None,
            seed: 0,
            xi: 3.0,
            weights: FrequencyWeights::default(),
            omega_form: OmegaForm::HalfTanh,
            sigma_form: SigmaForm::Standard,
            backprojection: true,
            x0_clip: None,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.reverse_steps == 0 {
            return bad("reverse_steps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.inversion_noise_scale) {
            return bad(format!(
                "inversion noise scale must be in [0, 1], got {}",
                self.inversion_noise_scale
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return bad(format!("xi must be >= 0, got {}", self.xi));
        }
        if let Some(c) = self.x0_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("x0 clip must be positive, got {c}"));
            }
        }
        self.weights.validate()?;
        let t_start = self.t_start(s);
        if t_start >= s.len() {
            return bad(format!("t_start {t_start} outside schedule of length {}", s.len()));
        }
        if self.reverse_steps > t_start + 1 {
            return bad(format!(
                "{} reverse steps do not fit below t_start = {t_start}",
                self.reverse_steps
            ));
        }
        if self.inversion_steps > t_start {
            return bad(format!(
                "{} inversion steps do not fit below t_start = {t_start}",
                self.inversion_steps
            ));
        }
        Ok(())
    }

    pub fn t_start(&self, s: &NoiseSchedule) -> usize {
        self.t_start.unwrap_or(s.len().saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step_index: usize,
    pub t: usize,
    pub delta: f64,
    pub omega: f64,
    pub x0_norm: f64,
    pub cum_nfe: usize,
}

/// Per reverse-step diagnostics plus the total denoiser call count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleTrace {
    pub records: Vec<TraceRecord>,
    pub inversion_nfe: usize,
    pub nfe: usize,
}

impl SampleTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step_index,t,delta,omega,x0_norm,cum_nfe\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step_index, r.t, r.delta, r.omega, r.x0_norm, r.cum_nfe
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.delta).collect()
    }
}

pub fn standard_normal_stack(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> PseudoRealStack {
    let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
    PseudoRealStack::from_vec(c, h, w, data).expect("length matches")
}

fn sigma(
    s: &NoiseSchedule,
    t: usize,
    ab_prev: f64,
    eta: f64,
    form: SigmaForm,
) -> Result<f64> {
    if eta == 0.0 {
        return Ok(0.0);
    }
    let (beta, ab) = (s.beta(t)?, s.alpha_bar(t)?);
    let ratio = beta * (1.0 - ab_prev) / (1.0 - ab);
    Ok(eta
        * match form {
            SigmaForm::Standard => ratio.sqrt(),
            SigmaForm::Literal => ratio,
        })
}

/// `sqrt(ab_prev) x0 + sqrt(1 - ab_prev - sigma^2) eps + sigma z`.
fn ddim_update(
    x0: &PseudoRealStack,
    eps: &PseudoRealStack,
    ab_prev: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<PseudoRealStack> {
    let a = ab_prev.sqrt();
    let b = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = x0.zip_map(eps, |x, e| a * x + b * e)?;
    if sigma > 0.0 {
        for v in out.data_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

/// One reverse DDIM step from `t` to `t_prev` (`None` = clean image).
pub fn ddim_reverse_step<D: Denoiser + ?Sized>(
    x_t: &PseudoRealStack,
    t: usize,
    t_prev: Option<usize>,
    den: &D,
    s: &NoiseSchedule,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<PseudoRealStack> {
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::IndexOutOfRange(format!("need t > t_prev, got {t} and {tp}")));
        }
    }
    let eps = den.eps(x_t, t)?;
    let x0 = x0_from_alpha_bar(x_t, &eps, s.alpha_bar(t)?)?;
    let ab_prev = s.alpha_bar_or_clean(t_prev)?;
    let sig = match t_prev {
        Some(_) => sigma(s, t, ab_prev, eta, SigmaForm::Standard)?,
        None => 0.0,
    };
    ddim_update(&x0, &eps, ab_prev, sig, rng)
}

/// Deterministic ascent `sqrt(ab_next) x0 + sqrt(1 - ab_next) eps`.
pub fn ddim_forward_naive<D: Denoiser + ?Sized>(
    x_t: &PseudoRealStack,
    t: usize,
    t_next: usize,
    den: &D,
    s: &NoiseSchedule,
) -> Result<PseudoRealStack> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    dai_forward_step(x_t, t, t_next, den, s, 0.0, &mut unused)
}

/// Ascent with a controlled fresh-noise term:
/// `sqrt(ab_n) x0 + sqrt(1 - ab_n - lam beta_n) eps + sqrt(lam beta_n) z`.
pub fn dai_forward_step<D: Denoiser + ?Sized>(
    x_t: &PseudoRealStack,
    t: usize,
    t_next: usize,
    den: &D,
    s: &NoiseSchedule,
    noise_scale: f64,
    rng: &mut impl Rng,
) -> Result<PseudoRealStack> {
    if t_next <= t {
        return Err(Error::IndexOutOfRange(format!("need t_next > t, got {t} and {t_next}")));
    }
    let ab_next = s.alpha_bar(t_next)?;
    let lam_beta = noise_scale * s.beta(t_next)?;
    let radicand = 1.0 - ab_next - lam_beta;
    if radicand < 0.0 {
        return Err(Error::InfeasibleSchedule(format!(
            "1 - alpha_bar - noise_scale * beta = {radicand} at t = {t_next}; lower the noise scale"
        )));
    }
    let eps = den.eps(x_t, t)?;
    let x0 = x0_from_alpha_bar(x_t, &eps, s.alpha_bar(t)?)?;
    let (a, b, c) = (ab_next.sqrt(), radicand.sqrt(), lam_beta.sqrt());
    let mut out = x0.zip_map(&eps, |x, e| a * x + b * e)?;
    if c > 0.0 {
        for v in out.data_mut() {
            *v += c * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

/// Maps a clean estimate up to `t_start` along an ascending plan. With zero
/// steps the result is a fresh standard-normal draw.
pub fn invert<D: Denoiser + ?Sized>(
    x0_prime: &PseudoRealStack,
    cfg: &ReconConfig,
    den: &D,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<PseudoRealStack> {
    let (c, h, w) = x0_prime.shape();
    if cfg.inversion_steps == 0 {
        return Ok(standard_normal_stack(c, h, w, rng));
    }
    let plan = ascending_plan(cfg.inversion_steps, cfg.t_start(s))?;
    let mut x = x0_prime.clone();
    for k in 0..cfg.inversion_steps {
        x = dai_forward_step(&x, plan[k], plan[k + 1], den, s, cfg.inversion_noise_scale, rng)?;
    }
    Ok(x)
}

/// Unconditional reverse DDIM from `x_start` along the configured plan.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    x_start: &PseudoRealStack,
    den: &D,
    s: &NoiseSchedule,
    cfg: &ReconConfig,
    rng: &mut impl Rng,
) -> Result<PseudoRealStack> {
    let plan = uniform_plan(s, cfg.reverse_steps, cfg.t_start(s), cfg.eta)?;
    let mut x = x_start.clone();
    for (t, t_prev) in plan.pairs() {
        x = ddim_reverse_step(&x, t, t_prev, den, s, cfg.eta, rng)?;
    }
    Ok(x)
}

enum Projection<'a> {
    Adaptive(&'a ReconConfig),
    Ddnm,
}

#[allow(clippy::too_many_arguments)]
fn reverse_loop<D: Denoiser + ?Sized>(
    mut x: PseudoRealStack,
    y: &KSpaceData,
    op: &EncodingOperator,
    den: &D,
    s: &NoiseSchedule,
    cfg: &ReconConfig,
    projection: Projection<'_>,
    rng: &mut ChaCha8Rng,
    mut trace: SampleTrace,
) -> Result<(PseudoRealStack, SampleTrace)> {
    let plan = uniform_plan(s, cfg.reverse_steps, cfg.t_start(s), cfg.eta)?;
    let (h, w) = op.dims();
    let weights = cfg.weights.clamped_to(h, w);
    let mut delta_prev = 0.0;
    for (step_index, (t, t_prev)) in plan.pairs().enumerate() {
        let eps = den.eps(&x, t)?;
        trace.nfe += 1;
        let mut x0 = x0_from_alpha_bar(&x, &eps, s.alpha_bar(t)?)?;
        if let Some(c) = cfg.x0_clip {
            x0.data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
        let grid = from_pseudo_real(&x0)?;
        let (x0, delta, omega) = match projection {
            Projection::Adaptive(cfg) if cfg.backprojection => {
                let st = ConsistencyState {
                    xi: cfg.xi,
                    delta_prev,
                    delta_curr: 0.0,
                };
                let bp = backproject_adaptive(&grid, y, op, &weights, &st, cfg.omega_form)?;
                delta_prev = bp.delta;
                (to_pseudo_real(&bp.x), bp.delta, bp.omega)
            }
            Projection::Adaptive(_) => (x0, 0.0, 0.0),
            Projection::Ddnm => {
                let r = residual(&grid, y, op)?;
                let out = grid.sub(&op.adjoint(&r)?)?;
                (to_pseudo_real(&out), r.norm(), 1.0)
            }
        };
        let ab_prev = s.alpha_bar_or_clean(t_prev)?;
        let sig = match t_prev {
            Some(_) => sigma(s, t, ab_prev, cfg.eta, cfg.sigma_form)?,
            None => 0.0,
        };
        trace.records.push(TraceRecord {
            step_index,
            t,
            delta,
            omega,
            x0_norm: x0.norm(),
            cum_nfe: trace.nfe,
        });
        x = ddim_update(&x0, &eps, ab_prev, sig, rng)?;
        if !x.is_finite() {
            return Err(Error::Divergence {
                step: step_index,
                t,
                trace: Box::new(trace),
            });
        }
    }
    Ok((x, trace))
}

fn normalized_problem(y: &KSpaceData, op: &EncodingOperator) -> Result<(ComplexGrid, NormParams, KSpaceData)> {
    let zf = op.zero_filled(y)?;
    let (xn, params) = normalize(&zf)?;
    let yn = y.scale(1.0 / params.factor());
    Ok((xn, params, yn))
}

/// Reconstruction by inversion of the zero-filled image followed by reverse
/// DDIM with adaptive back-projection. Works in normalized units and returns
/// the result on the scale of `y`.
pub fn spa_mri_sample<D: Denoiser + ?Sized>(
    y: &KSpaceData,
    op: &EncodingOperator,
    den: &D,
    s: &NoiseSchedule,
    cfg: &ReconConfig,
) -> Result<(ComplexGrid, SampleTrace)> {
    cfg.validate(s)?;
    let (xn, params, yn) = normalized_problem(y, op)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seed = invert(&to_pseudo_real(&xn), cfg, den, s, &mut rng)?;
    let trace = SampleTrace {
        inversion_nfe: cfg.inversion_steps,
        nfe: cfg.inversion_steps,
        ..SampleTrace::default()
    };
    let (x, trace) = reverse_loop(seed, &yn, op, den, s, cfg, Projection::Adaptive(cfg), &mut rng, trace)?;
    Ok((denormalize(&from_pseudo_real(&x)?, params)?, trace))
}

/// DDNM baseline: reverse DDIM from Gaussian noise with a null-space
/// projection of every clean estimate. Ignores the inversion settings,
/// including `t_start`: a pure-noise seed only matches the marginal at the
/// last schedule index, so the chain always starts there.
pub fn ddnm_sample<D: Denoiser + ?Sized>(
    y: &KSpaceData,
    op: &EncodingOperator,
    den: &D,
    s: &NoiseSchedule,
    cfg: &ReconConfig,
) -> Result<(ComplexGrid, SampleTrace)> {
    cfg.validate(s)?;
    let cfg = &ReconConfig {
        t_start: None,
        ..cfg.clone()
    };
    let (xn, params, yn) = normalized_problem(y, op)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = 2 * xn.frames();
    let seed = standard_normal_stack(c, xn.height(), xn.width(), &mut rng);
    let (x, trace) = reverse_loop(seed, &yn, op, den, s, cfg, Projection::Ddnm, &mut rng, SampleTrace::default())?;
    Ok((denormalize(&from_pseudo_real(&x)?, params)?, trace))
}
