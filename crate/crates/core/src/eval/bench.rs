//! Benchmark grid: patterns x accelerations x seeds x methods.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use super::metrics::{psnr, ssim, unit_magnitude};
use super::panels::write_panel;
use super::{gen_phantom, simulate_acquisition};
use crate::cxg::Tensor;
use crate::denoiser::Denoiser;
use crate::encoding::{gen_coil_maps, CoilSensitivities, EncodingOperator, KSpaceData};
use crate::error::{Error, Result};
use crate::grid::ComplexGrid;
use crate::masks::{gen_mask, Pattern};
use crate::sampler::{ddnm_sample, spa_mri_sample, ReconConfig};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ZeroFilled,
    Ddnm,
    Spa,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ZeroFilled, Method::Ddnm, Method::Spa];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroFilled => "zero-filled",
            Method::Ddnm => "ddnm",
            Method::Spa => "spa",
        }
    }

    /// Runs the method; the result is on the scale of `y`.
    pub fn reconstruct<D: Denoiser + ?Sized>(
        self,
        y: &KSpaceData,
        op: &EncodingOperator,
        den: &D,
        s: &NoiseSchedule,
        cfg: &ReconConfig,
    ) -> Result<(ComplexGrid, usize)> {
        match self {
            Method::ZeroFilled => Ok((op.zero_filled(y)?, 0)),
            Method::Ddnm => ddnm_sample(y, op, den, s, cfg).map(|(x, t)| (x, t.nfe)),
            Method::Spa => spa_mri_sample(y, op, den, s, cfg).map(|(x, t)| (x, t.nfe)),
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-filled" | "zf" => Ok(Method::ZeroFilled),
            "ddnm" => Ok(Method::Ddnm),
            "spa" => Ok(Method::Spa),
            other => Err(Error::InvalidParameter(format!(
                "unknown method '{other}' (expected zero-filled, ddnm or spa)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub patterns: Vec<Pattern>,
    pub accels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub height: usize,
    pub width: usize,
    pub coils: usize,
    pub ellipses: usize,
    /// Fully sampled center columns; `None` uses `floor(width / (2 R))`.
    pub acs: Option<usize>,
    pub recon: ReconConfig,
    pub output_dir: Option<PathBuf>,
    pub panels: bool,
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            patterns: vec![Pattern::Gaussian, Pattern::Uniform, Pattern::Radial],
            accels: vec![4.0, 12.0, 24.0],
            seeds: vec![10_000, 10_001, 10_002],
            methods: Method::ALL.to_vec(),
            height: 64,
            width: 64,
            coils: 4,
            ellipses: 10,
            acs: None,
            recon: ReconConfig::default(),
            output_dir: None,
            panels: true,
            workers: 1,
        }
    }
}

impl BenchConfig {
    pub fn acs_for(&self, accel: f64) -> usize {
        self.acs
            .unwrap_or_else(|| (self.width as f64 / (2.0 * accel)).floor() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() || self.accels.is_empty() || self.seeds.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidParameter(
                "benchmark needs at least one pattern, accel, seed and method".into(),
            ));
        }
        if self.accels.iter().any(|&a| !(a >= 1.0 && a.is_finite())) {
            return Err(Error::InvalidParameter("accelerations must be >= 1".into()));
        }
        if self.coils == 0 || self.workers == 0 {
            return Err(Error::InvalidParameter("coils and workers must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub pattern: Pattern,
    pub accel: f64,
    pub seed: u64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub nfe: usize,
    pub seconds: f64,
    /// Error message when the reconstruction failed.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

fn fmt_accel(a: f64) -> String {
    if a.fract() == 0.0 {
        format!("{}", a as i64)
    } else {
        format!("{a}")
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl BenchReport {
    pub const HEADER: &'static str = "method,pattern,accel,seed,psnr_db,ssim,nfe,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let (p, s) = match r.failure {
                Some(_) => ("failed".to_string(), "failed".to_string()),
                None => (fmt_metric(r.psnr_db), fmt_metric(r.ssim)),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.3}\n",
                r.method,
                r.pattern,
                fmt_accel(r.accel),
                r.seed,
                p,
                s,
                r.nfe,
                r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// PSNR values of successful rows for one cell group.
    pub fn psnrs(&self, method: Method, pattern: Pattern, accel: f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.pattern == pattern && r.accel == accel && r.failure.is_none())
            .map(|r| r.psnr_db)
            .collect()
    }

    pub fn median_psnr(&self, method: Method, pattern: Pattern, accel: f64) -> Option<f64> {
        median(self.psnrs(method, pattern, accel))
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Passes a tensor through its on-disk encoding so in-memory runs see the
/// same f32-rounded values as file-based pipelines.
fn through_file(t: Tensor) -> Result<Tensor> {
    let mut buf = Vec::new();
    t.write_to(&mut buf)?;
    Tensor::read_from(&buf[..])
}

/// Inputs of one benchmark cell, rounded exactly as the file pipeline
/// rounds them.
pub struct CellInputs {
    pub truth: ComplexGrid,
    pub op: EncodingOperator,
    pub y: KSpaceData,
}

pub fn cell_inputs(cfg: &BenchConfig, pattern: Pattern, accel: f64, seed: u64) -> Result<CellInputs> {
    let (h, w) = (cfg.height, cfg.width);
    let truth = ComplexGrid::from_tensor(through_file(
        gen_phantom(h, w, seed, cfg.ellipses)?.image.to_tensor(),
    )?)?;
    let coils = if cfg.coils == 1 {
        CoilSensitivities::unit(h, w)
    } else {
        CoilSensitivities::from_tensor(through_file(gen_coil_maps(cfg.coils, h, w, seed)?.to_tensor())?)?
    };
    let mask = gen_mask(pattern, h, w, accel, cfg.acs_for(accel), seed)?;
    let op = EncodingOperator::new(mask, coils)?;
    let y = KSpaceData::from_tensor(through_file(simulate_acquisition(&truth, &op)?.to_tensor())?)?;
    Ok(CellInputs { truth, op, y })
}

/// PSNR and SSIM of `|x|` and `|truth|`, each scaled to a unit maximum.
pub fn score(x: &ComplexGrid, truth: &ComplexGrid) -> Result<(f64, f64)> {
    let (a, b) = (unit_magnitude(x), unit_magnitude(truth));
    Ok((psnr(&a, &b)?.db(), ssim(&a, &b)?))
}

fn run_cell<D: Denoiser + ?Sized>(
    cfg: &BenchConfig,
    den: &D,
    s: &NoiseSchedule,
    pattern: Pattern,
    accel: f64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let inputs = cell_inputs(cfg, pattern, accel, seed)?;
    let recon_cfg = ReconConfig {
        seed,
        ..cfg.recon.clone()
    };
    let mut rows = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let start = Instant::now();
        let outcome = method
            .reconstruct(&inputs.y, &inputs.op, den, s, &recon_cfg)
            .and_then(|(x, nfe)| {
                let x = ComplexGrid::from_tensor(through_file(x.to_tensor())?)?;
                Ok((x, nfe))
            });
        let seconds = start.elapsed().as_secs_f64();
        let row = match outcome {
            Ok((x, nfe)) => {
                let (p, q) = score(&x, &inputs.truth)?;
                if cfg.panels {
                    if let Some(dir) = &cfg.output_dir {
                        let name = format!("{}_R{}_seed{}_{}.png", pattern, fmt_accel(accel), seed, method);
                        let truth = unit_magnitude(&inputs.truth).magnitude(0);
                        let recon = unit_magnitude(&x).magnitude(0);
                        write_panel(dir.join(name), cfg.height, cfg.width, &truth, &recon, 5.0)?;
                    }
                }
                BenchRow {
                    method,
                    pattern,
                    accel,
                    seed,
                    psnr_db: p,
                    ssim: q,
                    nfe,
                    seconds,
                    failure: None,
                }
            }
            Err(e) => BenchRow {
                method,
                pattern,
                accel,
                seed,
                psnr_db: f64::NAN,
                ssim: f64::NAN,
                nfe: 0,
                seconds,
                failure: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Runs every cell (in parallel over `cfg.workers` threads) and returns
/// rows in configuration order. Failed reconstructions are recorded, not
/// propagated.
pub fn run_benchmark_with<D: Denoiser + ?Sized>(
    cfg: &BenchConfig,
    den: &D,
    s: &NoiseSchedule,
) -> Result<BenchReport> {
    cfg.validate()?;
    cfg.recon.validate(s)?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut cells = Vec::new();
    for &p in &cfg.patterns {
        for &a in &cfg.accels {
            for &seed in &cfg.seeds {
                cells.push((p, a, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<BenchRow>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(p, a, seed)| run_cell(cfg, den, s, p, a, seed))
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let report = BenchReport { rows };
    if let Some(dir) = &cfg.output_dir {
        report.write_csv(dir.join("report.csv"))?;
    }
    Ok(report)
}

/// Loads a settings file, builds the denoiser it names and runs the grid.
pub fn run_benchmark(cfg_path: impl AsRef<Path>) -> Result<BenchReport> {
    let settings = crate::config::Settings::load(cfg_path)?;
    let schedule = settings.schedule()?;
    let den = settings.build_denoiser(&schedule)?;
    run_benchmark_with(&settings.bench_config(), den.as_ref(), &schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticDenoiser, GaussianPrior};
    use crate::eval::phantom_dataset;
    use crate::schedule::cosine_schedule;

    fn small_cfg() -> BenchConfig {
        BenchConfig {
            patterns: vec![Pattern::Gaussian],
            accels: vec![4.0],
            seeds: vec![3],
            height: 32,
            width: 32,
            coils: 2,
            recon: ReconConfig {
                reverse_steps: 10,
                inversion_steps: 3,
                ..ReconConfig::default()
            },
            ..BenchConfig::default()
        }
    }

    fn den(s: &NoiseSchedule) -> AnalyticDenoiser {
        let data = phantom_dataset(32, 32, 100..140, 10).unwrap();
        AnalyticDenoiser::new(GaussianPrior::fit(&data, 1e-3).unwrap(), s.clone())
    }

    #[test]
    fn single_cell_reports_three_methods() {
        let s = cosine_schedule(200).unwrap();
        let d = den(&s);
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..small_cfg()
        };
        let report = run_benchmark_with(&cfg, &d, &s).unwrap();
        assert_eq!(report.rows.len(), 3);
        let nfes: Vec<usize> = report.rows.iter().map(|r| r.nfe).collect();
        assert_eq!(nfes, vec![0, 10, 13]);
        assert!(report.rows.iter().all(|r| r.failure.is_none() && (-1.0..=1.0).contains(&r.ssim)));
        for m in ["zero-filled", "ddnm", "spa"] {
            assert!(dir.path().join(format!("gaussian_R4_seed3_{m}.png")).exists());
        }
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv.starts_with(BenchReport::HEADER));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn row_count_and_worker_independence() {
        let s = cosine_schedule(200).unwrap();
        let d = den(&s);
        let cfg = BenchConfig {
            patterns: vec![Pattern::Gaussian, Pattern::Radial],
            accels: vec![4.0, 8.0],
            seeds: vec![1, 2],
            methods: vec![Method::ZeroFilled, Method::Spa],
            ..small_cfg()
        };
        let a = run_benchmark_with(&cfg, &d, &s).unwrap();
        assert_eq!(a.rows.len(), 2 * 2 * 2 * 2);
        let b = run_benchmark_with(&BenchConfig { workers: 3, ..cfg }, &d, &s).unwrap();
        let strip = |r: &BenchReport| {
            r.rows
                .iter()
                .map(|x| (x.method, x.pattern, x.seed, x.psnr_db.to_bits(), x.ssim.to_bits(), x.nfe))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn failures_are_recorded() {
        let s = cosine_schedule(200).unwrap();
        struct Nan;
        impl Denoiser for Nan {
            fn eps(&self, x: &crate::grid::PseudoRealStack, _t: usize) -> Result<crate::grid::PseudoRealStack> {
                Ok(x.map(|_| f64::NAN))
            }
        }
        let report = run_benchmark_with(&small_cfg(), &Nan, &s).unwrap();
        assert!(report.rows[0].failure.is_none());
        assert!(report.rows[1].failure.is_some());
        assert!(report.to_csv().contains("ddnm,gaussian,4,3,failed,failed"));
    }

    #[test]
    fn median_helper() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
