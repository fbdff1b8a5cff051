//! Noise-prediction training for the tiny denoiser.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::Act;
use super::precond::Preconditioner;
use super::tiny::{TinyDenoiserWeights, TinyUNetConfig};
use crate::error::{Error, Result};
use crate::grid::PseudoRealStack;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidParameter(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

/// How training timesteps are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimestepSampling {
    Uniform,
    /// `ln(sigma) ~ N(mean, std^2)` with `sigma^2 = (1 - alpha_bar) /
    /// alpha_bar`, mapped to the timestep with the nearest `alpha_bar`.
    LogNormal { mean: f64, std: f64 },
}

impl TimestepSampling {
    fn draw(self, alpha_bars: &[f64], rng: &mut impl Rng) -> usize {
        match self {
            Self::Uniform => rng.gen_range(0..alpha_bars.len()),
            Self::LogNormal { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                let sigma = (mean + std * z).exp();
                let target = 1.0 / (1.0 + sigma * sigma);
                // alpha_bar decreases with t
                let i = alpha_bars.partition_point(|&a| a > target);
                if i == 0 {
                    0
                } else if i == alpha_bars.len() || alpha_bars[i - 1] - target < target - alpha_bars[i] {
                    i - 1
                } else {
                    i
                }
            }
        }
    }
}

impl FromStr for TimestepSampling {
    type Err = Error;
    /// `uniform` or `log-normal:MEAN:STD`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown timestep sampling '{s}'"));
        match s.split(':').collect::<Vec<_>>()[..] {
            ["uniform"] => Ok(Self::Uniform),
            ["log-normal", m, sd] => {
                let (mean, std) = (m.parse().map_err(|_| bad())?, sd.parse().map_err(|_| bad())?);
                if !(f64::is_finite(mean) && std > 0.0 && f64::is_finite(std)) {
                    return Err(bad());
                }
                Ok(Self::LogNormal { mean, std })
            }
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for TimestepSampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Uniform => f.write_str("uniform"),
            Self::LogNormal { mean, std } => write!(f, "log-normal:{mean}:{std}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub net: Option<TinyUNetConfig>,
    /// Decay of an exponential moving average of the weights; the average
    /// is returned instead of the raw iterate when set.
    pub ema_decay: Option<f64>,
    /// Random flips and quarter-turn global phase rotations of each sample.
    pub augment: bool,
    /// Fit a [`Preconditioner`] to the data and train the network on the
    /// residual it leaves.
    pub precondition: bool,
    /// Train on random square crops of this side instead of whole images.
    /// Must divide by the network's spatial multiple.
    pub crop: Option<usize>,
    pub timesteps: TimestepSampling,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            batch_size: 8,
            seed,
            optimizer: Optimizer::Adam,
            net: None,
            ema_decay: Some(0.995),
            augment: true,
            precondition: true,
            crop: None,
            timesteps: TimestepSampling::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-element squared error for each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn first(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }
    pub fn last(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Flips rows and columns at random and multiplies by a random power of
/// `i`. Keeps the largest pseudo-real component unchanged.
fn augmented(s: &PseudoRealStack, rng: &mut impl Rng) -> PseudoRealStack {
    let (c, h, w) = s.shape();
    let (flip_r, flip_c, quarter) = (rng.gen::<bool>(), rng.gen::<bool>(), rng.gen_range(0..4));
    let n = h * w;
    let src = s.data();
    let mut out = vec![0.0; src.len()];
    for f in 0..c / 2 {
        let base = 2 * f * n;
        for r in 0..h {
            let sr = if flip_r { h - 1 - r } else { r };
            for col in 0..w {
                let sc = if flip_c { w - 1 - col } else { col };
                let (re, im) = (src[base + sr * w + sc], src[base + n + sr * w + sc]);
                let (re, im) = match quarter {
                    0 => (re, im),
                    1 => (-im, re),
                    2 => (-re, -im),
                    _ => (im, -re),
                };
                out[base + r * w + col] = re;
                out[base + n + r * w + col] = im;
            }
        }
    }
    PseudoRealStack::from_vec(c, h, w, out).expect("shape preserved")
}

fn cropped(s: &PseudoRealStack, side: usize, rng: &mut impl Rng) -> PseudoRealStack {
    let (c, h, w) = s.shape();
    let (r0, c0) = (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side));
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for r in r0..r0 + side {
            let start = ch * h * w + r * w + c0;
            out.extend_from_slice(&s.data()[start..start + side]);
        }
    }
    PseudoRealStack::from_vec(c, side, side, out).expect("crop fits")
}

fn to_act(s: &PseudoRealStack) -> Act {
    let (c, h, w) = s.shape();
    Act {
        c,
        h,
        w,
        data: s.data().iter().map(|&v| v as f32).collect(),
    }
}

/// Trains on `(x0, t, eps)` triples with `t` uniform over the schedule and
/// an unweighted squared error on the network output, which is the noise
/// itself or, with preconditioning, the scaled residual. Deterministic for a
/// given seed.
pub fn train_tiny_denoiser(
    dataset: &[PseudoRealStack],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(TinyDenoiserWeights, TrainReport)> {
    train_with_progress(dataset, schedule, cfg, |_, _| {})
}

/// Like [`train_tiny_denoiser`] but reports `(epoch, loss)` after each epoch.
pub fn train_with_progress(
    dataset: &[PseudoRealStack],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(TinyDenoiserWeights, TrainReport)> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let shape = first.shape();
    if let Some(bad) = dataset.iter().find(|s| s.shape() != shape) {
        return Err(Error::Shape(format!(
            "dataset shapes differ: {:?} vs {:?}",
            shape,
            bad.shape()
        )));
    }
    if let Some(d) = cfg.ema_decay {
        if !(0.0..1.0).contains(&d) {
            return Err(Error::InvalidParameter(format!("EMA decay must be in [0, 1), got {d}")));
        }
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || cfg.batch_size == 0 {
        return Err(Error::InvalidParameter(
            "learning rate and batch size must be positive".into(),
        ));
    }
    let net = cfg.net.clone().unwrap_or_else(|| TinyUNetConfig::new(shape.0));
    if let Some(side) = cfg.crop {
        if side == 0 || side > shape.1 || side > shape.2 || side % net.spatial_multiple() != 0 {
            return Err(Error::InvalidParameter(format!(
                "crop side {side} must fit the {}x{} images and divide by {}",
                shape.1,
                shape.2,
                net.spatial_multiple()
            )));
        }
    }
    let precond = if cfg.precondition {
        Some(Preconditioner::fit(dataset, schedule)?)
    } else {
        None
    };
    let mut weights = TinyDenoiserWeights::init(net.clone(), cfg.seed)?;
    let zero = TinyDenoiserWeights::zeros(net)?;
    let mut ema = cfg.ema_decay.map(|d| (d as f32, weights.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let lr = cfg.lr as f32;
    let mut adam = AdamState {
        m: zero.clone().buffers_mut().iter().map(|b| vec![0.0; b.len()]).collect(),
        v: zero.clone().buffers_mut().iter().map(|b| vec![0.0; b.len()]).collect(),
        step: 0,
    };
    let n_elem = match cfg.crop {
        Some(side) => (shape.0 * side * side) as f32,
        None => first.len() as f32,
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = zero.clone();
            let scale = 2.0 / (n_elem * batch.len() as f32);
            for &i in batch {
                let mut x0 = std::borrow::Cow::Borrowed(&dataset[i]);
                if let Some(side) = cfg.crop {
                    x0 = std::borrow::Cow::Owned(cropped(&x0, side, &mut rng));
                }
                if cfg.augment {
                    x0 = std::borrow::Cow::Owned(augmented(&x0, &mut rng));
                }
                let x0 = x0.as_ref();
                let t = cfg.timesteps.draw(schedule.alpha_bars(), &mut rng);
                let ab = schedule.alpha_bar(t)?;
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                let noise: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
                let mut x_t = to_act(x0);
                for ((v, &x), &e) in x_t.data.iter_mut().zip(x0.data()).zip(&noise) {
                    *v = (sa * x + sn * e) as f32;
                }
                let target: Vec<f32> = match &precond {
                    None => noise.iter().map(|&e| e as f32).collect(),
                    Some(p) => {
                        let k = p.coeffs(t)?;
                        let mut target = Vec::with_capacity(noise.len());
                        for (v, &e) in x_t.data.iter_mut().zip(&noise) {
                            let u = *v - k.sa * p.mean;
                            target.push((e as f32 - k.lin * u) / k.c_out);
                            *v = k.c_in * u;
                        }
                        target
                    }
                };
                let (pred, cache) = weights.forward(x_t, t)?;
                let mut dy = pred.clone();
                let mut sq = 0.0f64;
                for (d, &e) in dy.data.iter_mut().zip(&target) {
                    let r = *d - e;
                    sq += (r as f64) * (r as f64);
                    *d = scale * r;
                }
                loss_sum += sq / n_elem as f64;
                weights.backward(&cache, &dy, &mut grad);
            }
            apply_update(&mut weights, &mut grad, cfg.optimizer, lr, &mut adam);
            if let Some((d, avg)) = ema.as_mut() {
                for (a, p) in avg.buffers_mut().into_iter().zip(weights.buffers_mut()) {
                    a.iter_mut().zip(p.iter()).for_each(|(a, p)| *a = *d * *a + (1.0 - *d) * p);
                }
            }
        }
        let loss = loss_sum / dataset.len() as f64;
        if !loss.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "training diverged at epoch {epoch}"
            )));
        }
        progress(epoch, loss);
        epoch_losses.push(loss);
    }
    let mut out = ema.map_or(weights, |(_, avg)| avg);
    out.precond = precond;
    Ok((out, TrainReport { epoch_losses }))
}

fn apply_update(
    weights: &mut TinyDenoiserWeights,
    grad: &mut TinyDenoiserWeights,
    optimizer: Optimizer,
    lr: f32,
    adam: &mut AdamState,
) {
    let params = weights.buffers_mut();
    let grads = grad.buffers_mut();
    match optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.into_iter().zip(grads) {
                p.iter_mut().zip(g.iter()).for_each(|(p, g)| *p -= lr * g);
            }
        }
        Optimizer::Adam => {
            adam.step += 1;
            let bc1 = 1.0 - BETA1.powi(adam.step);
            let bc2 = 1.0 - BETA2.powi(adam.step);
            for (((p, g), m), v) in params
                .into_iter()
                .zip(grads)
                .zip(adam.m.iter_mut())
                .zip(adam.v.iter_mut())
            {
                for i in 0..p.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::cosine_schedule;

    fn blob_dataset(n: usize, size: usize) -> Vec<PseudoRealStack> {
        (0..n)
            .map(|k| {
                let cx = size as f64 * (0.3 + 0.4 * ((k * 7) % 10) as f64 / 10.0);
                let mut data = vec![0.0; 2 * size * size];
                for r in 0..size {
                    for c in 0..size {
                        let d2 = (r as f64 - cx).powi(2) + (c as f64 - size as f64 / 2.0).powi(2);
                        data[r * size + c] = (-d2 / 20.0).exp();
                    }
                }
                PseudoRealStack::from_vec(2, size, size, data).unwrap()
            })
            .collect()
    }

    fn tiny_net() -> TinyUNetConfig {
        TinyUNetConfig {
            in_channels: 2,
            channels: vec![4, 8],
            emb_dim: 8,
            hidden_dim: 8,
        }
    }

    #[test]
    fn timestep_sampling_parses_and_maps_to_nearest_alpha_bar() {
        assert_eq!("uniform".parse::<TimestepSampling>().unwrap(), TimestepSampling::Uniform);
        let ln: TimestepSampling = "log-normal:-1.2:1.2".parse().unwrap();
        assert_eq!(ln, TimestepSampling::LogNormal { mean: -1.2, std: 1.2 });
        assert_eq!(ln.to_string().parse::<TimestepSampling>().unwrap(), ln);
        assert!("log-normal:0:0".parse::<TimestepSampling>().is_err());
        assert!("cosine".parse::<TimestepSampling>().is_err());
        let s = cosine_schedule(1000).unwrap();
        let ab = s.alpha_bars();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let narrow = TimestepSampling::LogNormal { mean: 0.0, std: 1e-9 };
        let t = narrow.draw(ab, &mut rng);
        // sigma = 1 means alpha_bar = 1/2
        assert!(ab.iter().all(|a| (a - 0.5).abs() >= (ab[t] - 0.5).abs()));
        let wide = TimestepSampling::LogNormal { mean: 0.0, std: 50.0 };
        for _ in 0..200 {
            assert!(wide.draw(ab, &mut rng) < ab.len());
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let s = cosine_schedule(100).unwrap();
        let mut cfg = TrainConfig::new(0, 1e-3, 9);
        cfg.net = Some(tiny_net());
        let data = blob_dataset(1, 8);
        let (w, report) = train_tiny_denoiser(&data, &s, &cfg).unwrap();
        let init = TinyDenoiserWeights::init(tiny_net(), 9).unwrap();
        assert_eq!(w, init.clone().with_preconditioner(Preconditioner::fit(&data, &s).unwrap()));
        assert!(report.epoch_losses.is_empty());
        cfg.precondition = false;
        assert_eq!(train_tiny_denoiser(&data, &s, &cfg).unwrap().0, init);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let s = cosine_schedule(100).unwrap();
        let cfg = TrainConfig::new(1, 1e-3, 0);
        assert!(matches!(
            train_tiny_denoiser(&[], &s, &cfg),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn deterministic_and_loss_decreases() {
        let s = cosine_schedule(100).unwrap();
        let data = blob_dataset(8, 8);
        let mut cfg = TrainConfig::new(30, 3e-3, 4);
        cfg.net = Some(tiny_net());
        let (w1, r1) = train_tiny_denoiser(&data, &s, &cfg).unwrap();
        let (w2, r2) = train_tiny_denoiser(&data, &s, &cfg).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(r1, r2);
        assert!(w1.is_finite());
        let head: f64 = r1.epoch_losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = r1.epoch_losses[25..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn sgd_moves_weights() {
        let s = cosine_schedule(50).unwrap();
        let mut cfg = TrainConfig::new(1, 1e-2, 1);
        cfg.optimizer = Optimizer::Sgd;
        cfg.net = Some(tiny_net());
        let (w, _) = train_tiny_denoiser(&blob_dataset(2, 8), &s, &cfg).unwrap();
        assert_ne!(w, TinyDenoiserWeights::init(tiny_net(), 1).unwrap());
    }
}
