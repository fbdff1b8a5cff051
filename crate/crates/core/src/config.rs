//! Plain-text settings: `key = value` lines with dotted keys, optional
//! `[section]` headers, and `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::consistency::OmegaForm;
use crate::denoiser::{
    AnalyticDenoiser, Denoiser, GaussianPrior, Optimizer, TinyDenoiser, TinyDenoiserWeights,
    TimestepSampling, TinyUNetConfig, TrainConfig,
};
use crate::error::{Error, Result};
use crate::eval::{phantom_dataset, BenchConfig, Method};
use crate::masks::Pattern;
use crate::sampler::{ReconConfig, SigmaForm};
use crate::schedule::{NoiseSchedule, ScheduleKind};

/// Parsed `key = value` pairs in file order of last assignment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Which noise model the CLI and benchmark use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    /// Trained tiny network loaded from `denoiser.weights`.
    Tiny,
    /// Diagonal Gaussian prior fitted to generated phantoms.
    Gaussian,
}

impl FromStr for DenoiserKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Config(format!(
                "denoiser.kind must be tiny or gaussian, got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for DenoiserKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tiny => "tiny",
            Self::Gaussian => "gaussian",
        })
    }
}

/// Fully resolved configuration for every command.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub schedule_kind: ScheduleKind,
    pub schedule_steps: usize,
    pub recon: ReconConfig,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub train_optimizer: Optimizer,
    pub train_samples: usize,
    pub train_channels: Vec<usize>,
    pub train_ema: Option<f64>,
    pub train_augment: bool,
    pub train_precondition: bool,
    pub train_crop: Option<usize>,
    pub train_timesteps: TimestepSampling,
    pub denoiser_kind: DenoiserKind,
    pub denoiser_weights: Option<PathBuf>,
    pub denoiser_fit_samples: usize,
    pub bench: BenchConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            schedule_kind: ScheduleKind::Cosine,
            schedule_steps: 4000,
            recon: ReconConfig::default(),
            train_epochs: 400,
            train_lr: 1e-3,
            train_batch: 8,
            train_optimizer: Optimizer::Adam,
            train_samples: 200,
            train_channels: TinyUNetConfig::new(2).channels,
            train_ema: TrainConfig::new(0, 1.0, 0).ema_decay,
            train_augment: true,
            train_precondition: true,
            train_crop: Some(48),
            train_timesteps: TimestepSampling::LogNormal { mean: -1.5, std: 1.5 },
            denoiser_kind: DenoiserKind::Tiny,
            denoiser_weights: None,
            denoiser_fit_samples: 200,
            bench: BenchConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{v}' for {key}"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_seeds(key: &str, v: &str) -> Result<Vec<u64>> {
    // "a..b" is a half-open range, otherwise a comma list
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse(key, a.trim())?, parse(key, b.trim())?);
        return Ok((a..b).collect());
    }
    parse_list(key, v)
}

impl Settings {
    pub const KEYS: &'static [&'static str] = &[
        "schedule.type",
        "schedule.T",
        "sampler.reverse_steps",
        "sampler.inversion_steps",
        "sampler.eta",
        "sampler.inversion_noise_scale",
        "sampler.t_start",
        "sampler.sigma_form",
        "sampler.backprojection",
        "sampler.x0_clip",
        "consistency.xi",
        "consistency.lambda_low",
        "consistency.lambda_high",
        "consistency.center",
        "consistency.omega_form",
        "train.epochs",
        "train.lr",
        "train.batch_size",
        "train.optimizer",
        "train.samples",
        "train.channels",
        "train.ema",
        "train.augment",
        "train.precondition",
        "train.crop",
        "train.timesteps",
        "denoiser.kind",
        "denoiser.weights",
        "denoiser.fit_samples",
        "bench.patterns",
        "bench.accels",
        "bench.seeds",
        "bench.methods",
        "bench.height",
        "bench.width",
        "bench.coils",
        "bench.ellipses",
        "bench.acs",
        "bench.output",
        "bench.panels",
        "bench.workers",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "schedule.type" => self.schedule_kind = v.parse()?,
            "schedule.T" => self.schedule_steps = parse(key, v)?,
            "sampler.reverse_steps" => self.recon.reverse_steps = parse(key, v)?,
            "sampler.inversion_steps" => self.recon.inversion_steps = parse(key, v)?,
            "sampler.eta" => self.recon.eta = parse(key, v)?,
            "sampler.inversion_noise_scale" => self.recon.inversion_noise_scale = parse(key, v)?,
            "sampler.t_start" => {
                self.recon.t_start = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "sampler.sigma_form" => self.recon.sigma_form = v.parse::<SigmaForm>()?,
            "sampler.backprojection" => self.recon.backprojection = parse_bool(key, v)?,
            "sampler.x0_clip" => {
                self.recon.x0_clip = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "consistency.xi" => self.recon.xi = parse(key, v)?,
            "consistency.lambda_low" => self.recon.weights.lambda_low = parse(key, v)?,
            "consistency.lambda_high" => self.recon.weights.lambda_high = parse(key, v)?,
            "consistency.center" => {
                let c: Vec<usize> = parse_list(key, &v.replace('x', ","))?;
                self.recon.weights.center = match c[..] {
                    [n] => (n, n),
                    [r, c] => (r, c),
                    _ => return Err(Error::Config(format!("invalid center '{v}'"))),
                };
            }
            "consistency.omega_form" => self.recon.omega_form = v.parse::<OmegaForm>()?,
            "train.epochs" => self.train_epochs = parse(key, v)?,
            "train.lr" => self.train_lr = parse(key, v)?,
            "train.batch_size" => self.train_batch = parse(key, v)?,
            "train.optimizer" => self.train_optimizer = v.parse()?,
            "train.samples" => self.train_samples = parse(key, v)?,
            "train.channels" => self.train_channels = parse_list(key, v)?,
            "train.ema" => self.train_ema = if v == "none" { None } else { Some(parse(key, v)?) },
            "train.augment" => self.train_augment = parse_bool(key, v)?,
            "train.precondition" => self.train_precondition = parse_bool(key, v)?,
            "train.crop" => self.train_crop = if v == "none" { None } else { Some(parse(key, v)?) },
            "train.timesteps" => self.train_timesteps = v.parse()?,
            "denoiser.kind" => self.denoiser_kind = v.parse()?,
            "denoiser.weights" => {
                self.denoiser_weights = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "denoiser.fit_samples" => self.denoiser_fit_samples = parse(key, v)?,
            "bench.patterns" => {
                self.bench.patterns = v
                    .split(',')
                    .map(|s| s.trim().parse::<Pattern>())
                    .collect::<Result<_>>()?
            }
            "bench.accels" => self.bench.accels = parse_list(key, v)?,
            "bench.seeds" => self.bench.seeds = parse_seeds(key, v)?,
            "bench.methods" => {
                self.bench.methods = v
                    .split(',')
                    .map(|s| s.trim().parse::<Method>())
                    .collect::<Result<_>>()?
            }
            "bench.height" => self.bench.height = parse(key, v)?,
            "bench.width" => self.bench.width = parse(key, v)?,
            "bench.coils" => self.bench.coils = parse(key, v)?,
            "bench.ellipses" => self.bench.ellipses = parse(key, v)?,
            "bench.acs" => self.bench.acs = if v == "auto" { None } else { Some(parse(key, v)?) },
            "bench.output" => {
                self.bench.output_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "bench.panels" => self.bench.panels = parse_bool(key, v)?,
            "bench.workers" => self.bench.workers = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let r = &self.recon;
        let b = &self.bench;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "schedule.type" => self.schedule_kind.to_string(),
            "schedule.T" => self.schedule_steps.to_string(),
            "sampler.reverse_steps" => r.reverse_steps.to_string(),
            "sampler.inversion_steps" => r.inversion_steps.to_string(),
            "sampler.eta" => r.eta.to_string(),
            "sampler.inversion_noise_scale" => r.inversion_noise_scale.to_string(),
            "sampler.t_start" => r.t_start.map_or("auto".into(), |t| t.to_string()),
            "sampler.sigma_form" => r.sigma_form.to_string(),
            "sampler.backprojection" => r.backprojection.to_string(),
            "sampler.x0_clip" => r.x0_clip.map_or("none".into(), |c| c.to_string()),
            "consistency.xi" => r.xi.to_string(),
            "consistency.lambda_low" => r.weights.lambda_low.to_string(),
            "consistency.lambda_high" => r.weights.lambda_high.to_string(),
            "consistency.center" => {
                let (a, c) = r.weights.center;
                if a == c {
                    a.to_string()
                } else {
                    format!("{a}x{c}")
                }
            }
            "consistency.omega_form" => r.omega_form.to_string(),
            "train.epochs" => self.train_epochs.to_string(),
            "train.lr" => self.train_lr.to_string(),
            "train.batch_size" => self.train_batch.to_string(),
            "train.optimizer" => self.train_optimizer.to_string(),
            "train.samples" => self.train_samples.to_string(),
            "train.channels" => join(&self.train_channels),
            "train.ema" => self.train_ema.map_or("none".into(), |d| d.to_string()),
            "train.augment" => self.train_augment.to_string(),
            "train.precondition" => self.train_precondition.to_string(),
            "train.crop" => self.train_crop.map_or("none".into(), |c| c.to_string()),
            "train.timesteps" => self.train_timesteps.to_string(),
            "denoiser.kind" => self.denoiser_kind.to_string(),
            "denoiser.weights" => path(&self.denoiser_weights),
            "denoiser.fit_samples" => self.denoiser_fit_samples.to_string(),
            "bench.patterns" => join(&b.patterns),
            "bench.accels" => join(&b.accels),
            "bench.seeds" => join(&b.seeds),
            "bench.methods" => join(&b.methods),
            "bench.height" => b.height.to_string(),
            "bench.width" => b.width.to_string(),
            "bench.coils" => b.coils.to_string(),
            "bench.ellipses" => b.ellipses.to_string(),
            "bench.acs" => b.acs.map_or("auto".into(), |a| a.to_string()),
            "bench.output" => path(&b.output_dir),
            "bench.panels" => b.panels.to_string(),
            "bench.workers" => b.workers.to_string(),
            _ => return None,
        })
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply_text(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k).unwrap_or_default()));
        }
        out
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule_kind, self.schedule_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.schedule()?;
        self.recon.validate(&s)?;
        self.bench.validate()?;
        self.net_config(2).validate()?;
        if !(self.train_lr > 0.0) || self.train_batch == 0 {
            return Err(Error::Config("train.lr and train.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn net_config(&self, in_channels: usize) -> TinyUNetConfig {
        TinyUNetConfig {
            channels: self.train_channels.clone(),
            ..TinyUNetConfig::new(in_channels)
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            lr: self.train_lr,
            batch_size: self.train_batch,
            seed,
            optimizer: self.train_optimizer,
            net: Some(self.net_config(2)),
            ema_decay: self.train_ema,
            augment: self.train_augment,
            precondition: self.train_precondition,
            crop: self.train_crop,
            timesteps: self.train_timesteps,
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            recon: self.recon.clone(),
            ..self.bench.clone()
        }
    }

    /// Builds the configured denoiser for `height x width` single-frame
    /// images (the benchmark size).
    pub fn build_denoiser(&self, s: &NoiseSchedule) -> Result<Box<dyn Denoiser>> {
        self.build_denoiser_for(s, self.bench.height, self.bench.width)
    }

    pub fn build_denoiser_for(&self, s: &NoiseSchedule, h: usize, w: usize) -> Result<Box<dyn Denoiser>> {
        match self.denoiser_kind {
            DenoiserKind::Tiny => {
                let path = self.denoiser_weights.as_ref().ok_or_else(|| {
                    Error::Config("denoiser.kind = tiny needs denoiser.weights".into())
                })?;
                Ok(Box::new(TinyDenoiser::new(TinyDenoiserWeights::load(path)?)))
            }
            DenoiserKind::Gaussian => {
                let base = 1_000_000u64;
                let data = phantom_dataset(
                    h,
                    w,
                    base..base + self.denoiser_fit_samples as u64,
                    self.bench.ellipses,
                )?;
                let prior = GaussianPrior::fit(&data, 1e-3)?;
                Ok(Box::new(AnalyticDenoiser::new(prior, s.clone())))
            }
        }
    }
}
