//! Discrete variance-preserving noise schedules and DDIM timestep plans.

use crate::error::{Error, Result};

/// Offset of the cosine schedule, keeping early betas away from zero.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip of every beta.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::InvalidParameter(format!("unknown schedule '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 steps, got {}",
                beta.len()
            )));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidParameter(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Cosine => cosine_schedule(steps),
            ScheduleKind::Linear => linear_schedule(steps),
        }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }
    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t < self.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange(format!(
                "timestep {t} outside schedule of length {}",
                self.len()
            )))
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    /// `alpha_bar` at an optional index; `None` is the clean end (1.0).
    pub fn alpha_bar_or_clean(&self, t: Option<usize>) -> Result<f64> {
        t.map_or(Ok(1.0), |t| self.alpha_bar(t))
    }
}

/// Cosine schedule: `alpha_bar(t) = f(t) / f(0)` with
/// `f(t) = cos^2(((t / T + s) / (1 + s)) * pi / 2)`, betas clipped to 0.999.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidParameter(format!(
            "cosine schedule needs T >= 2, got {steps}"
        )));
    }
    let f = |t: f64| {
        let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let beta = (0..steps)
        .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(MAX_BETA))
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// Linear betas from `1e-4` to `0.02`, rescaled to `steps` relative to a
/// 1000-step reference.
pub fn linear_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidParameter(format!(
            "linear schedule needs T >= 2, got {steps}"
        )));
    }
    let scale = 1000.0 / steps as f64;
    let (lo, hi) = (scale * 1e-4, (scale * 0.02).min(MAX_BETA));
    let beta = (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// `eta * sqrt(beta_t (1 - alpha_bar_prev) / (1 - alpha_bar_t))`.
pub fn ddim_sigma(s: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
    if t_prev >= t {
        return Err(Error::IndexOutOfRange(format!(
            "need t > t_prev, got t = {t}, t_prev = {t_prev}"
        )));
    }
    let (beta, ab) = (s.beta(t)?, s.alpha_bar(t)?);
    let ab_prev = s.alpha_bar(t_prev)?;
    if eta == 0.0 {
        return Ok(0.0);
    }
    Ok(eta * (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt())
}

/// Decreasing timesteps for reverse sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
    eta: f64,
}

impl TimestepPlan {
    pub fn new(steps: Vec<usize>, eta: f64) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidParameter("empty timestep plan".into()));
        }
        if steps.windows(2).any(|p| p[0] <= p[1]) {
            return Err(Error::InvalidParameter(
                "timestep plan must be strictly decreasing".into(),
            ));
        }
        if !(eta >= 0.0) {
            return Err(Error::InvalidParameter(format!("eta must be >= 0, got {eta}")));
        }
        Ok(Self { steps, eta })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(t, t_prev)` pairs; the last step has `t_prev = None`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, Option<usize>)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(move |(i, &t)| (t, self.steps.get(i + 1).copied()))
    }
}

/// Evenly spaced indices from `t_start` down to 0 (rounded). With a single
/// step the plan is just `[t_start]`.
pub fn uniform_plan(
    s: &NoiseSchedule,
    n_steps: usize,
    t_start: usize,
    eta: f64,
) -> Result<TimestepPlan> {
    if t_start >= s.len() {
        return Err(Error::InvalidParameter(format!(
            "t_start {t_start} outside schedule of length {}",
            s.len()
        )));
    }
    if n_steps == 0 || n_steps > t_start + 1 {
        return Err(Error::InvalidParameter(format!(
            "cannot place {n_steps} steps in [0, {t_start}]"
        )));
    }
    let steps = if n_steps == 1 {
        vec![t_start]
    } else {
        (0..n_steps)
            .map(|i| {
                let frac = (n_steps - 1 - i) as f64 / (n_steps - 1) as f64;
                (t_start as f64 * frac).round() as usize
            })
            .collect()
    };
    TimestepPlan::new(steps, eta)
}

/// Evenly spaced ascending indices `0 = p_0 < ... < p_n = t_end`, used by
/// inversion.
pub fn ascending_plan(n_steps: usize, t_end: usize) -> Result<Vec<usize>> {
    if n_steps > t_end {
        return Err(Error::InvalidParameter(format!(
            "cannot take {n_steps} inversion steps up to t = {t_end}"
        )));
    }
    Ok((0..=n_steps)
        .map(|i| {
            if n_steps == 0 {
                0
            } else {
                (t_end as f64 * i as f64 / n_steps as f64).round() as usize
            }
        })
        .collect())
}
