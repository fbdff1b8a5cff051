use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use spamri::config::Settings;
use spamri::cxg::Tensor;
use spamri::denoiser::{train_with_progress, Denoiser, TinyDenoiser, TinyDenoiserWeights};
use spamri::encoding::{gen_coil_maps, CoilSensitivities, EncodingOperator, KSpaceData};
use spamri::eval::{
    gen_phantom, phantom_dataset, psnr, run_benchmark_with, ssim, ssim_global, unit_magnitude,
    Method,
};
use spamri::grid::ComplexGrid;
use spamri::masks::{effective_acceleration, gen_mask, Pattern, SamplingMask};
use spamri::sampler::{ddnm_sample, spa_mri_sample, ReconConfig};

/// Diffusion-based reconstruction of undersampled MRI with synthetic data
/// tooling.
#[derive(Parser, Debug)]
#[command(name = "spamri", version)]
struct Cli {
    /// Settings file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a setting, e.g. `--set consistency.xi=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Print the fully resolved settings and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an ellipse phantom.
    Phantom(PhantomArgs),
    /// Generate a k-space sampling mask.
    Mask(MaskArgs),
    /// Generate normalized coil sensitivity maps.
    Coils(CoilArgs),
    /// Simulate noiseless multi-coil measurements of an image.
    Acquire(AcquireArgs),
    /// Train the tiny denoiser on generated phantoms.
    Train(TrainArgs),
    /// Reconstruct an image from undersampled k-space.
    Reconstruct(ReconArgs),
    /// PSNR and SSIM of a reconstruction against a reference.
    Eval(EvalArgs),
    /// Run the benchmark grid from the settings.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long, default_value_t = 64)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    ellipses: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long)]
    pattern: Pattern,
    #[arg(long)]
    accel: f64,
    /// Fully sampled center columns (ignored for radial masks).
    #[arg(long, default_value_t = 0)]
    acs: usize,
    #[arg(long, default_value_t = 64)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
    #[arg(long)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct CoilArgs {
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
    #[arg(long)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct AcquireArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Coil maps; a single unit coil when omitted.
    #[arg(long)]
    coils: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Number of training phantoms (seeds start at `--first-phantom`).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    first_phantom: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    ellipses: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: u64,
    /// Per-epoch loss CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ReconArgs {
    #[arg(long, default_value = "spa")]
    method: Method,
    #[arg(long)]
    kspace: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    coils: Option<PathBuf>,
    /// Tiny denoiser weights; otherwise `denoiser.*` settings apply.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Required for the diffusion methods.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-step trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Single-statistic SSIM instead of the windowed mean.
    #[arg(long)]
    global: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

/// Errors caused by bad input rather than a failed computation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<spamri::Error>() {
            use spamri::Error::*;
            return match e {
                InvalidParameter(_) | Config(_) | InfeasibleMask(_) | InfeasibleSchedule(_)
                | IndexOutOfRange(_) | Shape(_) | MalformedStack(_) | UnsupportedDenoiser(_)
                | EmptyDataset => 1,
                _ => 2,
            };
        }
    }
    2
}

fn thread_cap() -> Option<usize> {
    std::env::var("SPA_RECON_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn settings(cli: &Cli) -> anyhow::Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        s.apply_text(&text)?;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        s.set(k.trim(), v.trim())?;
    }
    s.validate()?;
    Ok(s)
}

fn load_tensor(path: &Path) -> anyhow::Result<Tensor> {
    Tensor::load(path).with_context(|| format!("reading {}", path.display()))
}

fn save_tensor(t: &Tensor, path: &Path) -> anyhow::Result<()> {
    t.save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_operator(mask: &Path, coils: Option<&Path>) -> anyhow::Result<EncodingOperator> {
    let mask = SamplingMask::from_tensor(load_tensor(mask)?)?;
    let coils = match coils {
        Some(p) => CoilSensitivities::from_tensor(load_tensor(p)?)?,
        None => CoilSensitivities::unit(mask.height(), mask.width()),
    };
    Ok(EncodingOperator::new(mask, coils)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = settings(&cli)?;
    if cli.print_config {
        print!("{}", settings.to_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(usage("no command given; see --help"));
    };
    match command {
        Command::Phantom(a) => {
            let ph = gen_phantom(a.h, a.w, a.seed, a.ellipses)?;
            save_tensor(&ph.image.to_tensor(), &a.output)?;
        }
        Command::Mask(a) => {
            let m = gen_mask(a.pattern, a.h, a.w, a.accel, a.acs, a.seed)?;
            save_tensor(&m.to_tensor(), &a.output)?;
            println!("effective_acceleration = {}", effective_acceleration(&m));
        }
        Command::Coils(a) => {
            let c = gen_coil_maps(a.n, a.h, a.w, a.seed)?;
            save_tensor(&c.to_tensor(), &a.output)?;
        }
        Command::Acquire(a) => {
            let img = ComplexGrid::from_tensor(load_tensor(&a.image)?)?;
            let op = load_operator(&a.mask, a.coils.as_deref())?;
            let y = spamri::eval::simulate_acquisition(&img, &op)?;
            save_tensor(&y.to_tensor(), &a.output)?;
        }
        Command::Train(a) => {
            let samples = a.samples.unwrap_or(settings.train_samples);
            let mut tc = settings.train_config(a.seed);
            if let Some(e) = a.epochs {
                tc.epochs = e;
            }
            if let Some(lr) = a.lr {
                tc.lr = lr;
            }
            let data = phantom_dataset(
                a.size,
                a.size,
                a.first_phantom..a.first_phantom + samples as u64,
                a.ellipses,
            )?;
            let schedule = settings.schedule()?;
            let (w, report) = train_with_progress(&data, &schedule, &tc, |e, l| {
                eprintln!("epoch {e}: loss {l:.5}");
            })?;
            w.save(&a.output)
                .with_context(|| format!("writing {}", a.output.display()))?;
            if let Some(p) = a.loss_csv {
                let mut csv = String::from("epoch,loss\n");
                for (i, l) in report.epoch_losses.iter().enumerate() {
                    csv.push_str(&format!("{i},{l}\n"));
                }
                std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Reconstruct(a) => {
            let op = load_operator(&a.mask, a.coils.as_deref())?;
            let y = KSpaceData::from_tensor(load_tensor(&a.kspace)?)?;
            let schedule = settings.schedule()?;
            let x = if a.method == Method::ZeroFilled {
                op.zero_filled(&y)?
            } else {
                let seed = a
                    .seed
                    .ok_or_else(|| usage(format!("--seed is required for --method {}", a.method)))?;
                let (h, w) = op.dims();
                let den: Box<dyn Denoiser> = match &a.weights {
                    Some(p) => Box::new(TinyDenoiser::new(
                        TinyDenoiserWeights::load(p)
                            .with_context(|| format!("reading {}", p.display()))?,
                    )),
                    None => settings.build_denoiser_for(&schedule, h, w)?,
                };
                let cfg = ReconConfig {
                    seed,
                    ..settings.recon.clone()
                };
                let (x, trace) = match a.method {
                    Method::Spa => spa_mri_sample(&y, &op, den.as_ref(), &schedule, &cfg)?,
                    _ => ddnm_sample(&y, &op, den.as_ref(), &schedule, &cfg)?,
                };
                eprintln!("nfe = {}", trace.nfe);
                if let Some(p) = &a.trace {
                    trace.write_csv(p)?;
                }
                x
            };
            save_tensor(&x.to_tensor(), &a.output)?;
        }
        Command::Eval(a) => {
            let x = unit_magnitude(&ComplexGrid::from_tensor(load_tensor(&a.recon)?)?);
            let r = unit_magnitude(&ComplexGrid::from_tensor(load_tensor(&a.reference)?)?);
            let p = psnr(&x, &r)?.db();
            let s = if a.global { ssim_global(&x, &r)? } else { ssim(&x, &r)? };
            println!("psnr_db,ssim");
            println!("{p:.6},{s:.6}");
        }
        Command::Bench(a) => {
            let mut cfg = settings.bench_config();
            if let Some(w) = a.workers {
                cfg.workers = w;
            }
            if let Some(cap) = thread_cap() {
                cfg.workers = cfg.workers.min(cap);
            }
            if let Some(o) = a.output {
                cfg.output_dir = Some(o);
            }
            let schedule = settings.schedule()?;
            let mut s = settings.clone();
            if let Some(w) = a.weights {
                s.denoiser_weights = Some(w);
            }
            let den = s.build_denoiser(&schedule)?;
            let report = run_benchmark_with(&cfg, den.as_ref(), &schedule)?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = thread_cap() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
