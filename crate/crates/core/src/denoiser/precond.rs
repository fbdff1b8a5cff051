//! Input and output scaling around the tiny network. The network learns the
//! residual over the noise estimate of a scalar Gaussian fit to the data,
//! with its input scaled to unit variance and its output scaled by the
//! residual's standard deviation.

use crate::error::{Error, Result};
use crate::grid::PseudoRealStack;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    /// Mean of all pseudo-real training values.
    pub mean: f32,
    /// Variance of all pseudo-real training values.
    pub var: f32,
    /// `alpha_bar` of the training schedule, indexed by timestep.
    pub alpha_bar: Vec<f32>,
}

/// Per-timestep coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Coeffs {
    /// `sqrt(alpha_bar)`
    pub sa: f32,
    /// Multiplies the centred input to give the linear noise estimate.
    pub lin: f32,
    pub c_in: f32,
    pub c_out: f32,
}

const MIN_C_OUT: f32 = 1e-4;

impl Preconditioner {
    pub fn new(mean: f64, var: f64, schedule: &NoiseSchedule) -> Result<Self> {
        if !(var > 0.0 && var.is_finite() && mean.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "preconditioner needs a finite mean and positive variance, got {mean}, {var}"
            )));
        }
        let alpha_bar = (0..schedule.len())
            .map(|t| schedule.alpha_bar(t).map(|a| a as f32))
            .collect::<Result<_>>()?;
        Ok(Self {
            mean: mean as f32,
            var: var as f32,
            alpha_bar,
        })
    }

    /// Scalar moments over every pseudo-real value of `data`.
    pub fn fit(data: &[PseudoRealStack], schedule: &NoiseSchedule) -> Result<Self> {
        let n: usize = data.iter().map(|d| d.len()).sum();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mean = data.iter().flat_map(|d| d.data()).sum::<f64>() / n as f64;
        let var = data
            .iter()
            .flat_map(|d| d.data())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        Self::new(mean, var, schedule)
    }

    pub(crate) fn coeffs(&self, t: usize) -> Result<Coeffs> {
        let ab = *self.alpha_bar.get(t).ok_or_else(|| {
            Error::IndexOutOfRange(format!(
                "timestep {t} outside the {} steps the denoiser was trained on",
                self.alpha_bar.len()
            ))
        })?;
        let total = ab * self.var + (1.0 - ab);
        Ok(Coeffs {
            sa: ab.sqrt(),
            lin: (1.0 - ab).sqrt() / total,
            c_in: 1.0 / total.sqrt(),
            c_out: (ab * self.var / total).sqrt().max(MIN_C_OUT),
        })
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ok = self.mean.is_finite()
            && self.var > 0.0
            && self.var.is_finite()
            && !self.alpha_bar.is_empty()
            && self.alpha_bar.iter().all(|a| (0.0..=1.0).contains(a));
        if ok {
            Ok(())
        } else {
            Err(Error::Format("invalid preconditioner record".into()))
        }
    }
}
