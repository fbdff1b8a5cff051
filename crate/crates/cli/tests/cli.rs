use std::path::Path;
use std::process::{Command, Output};

use spamri::config::{DenoiserKind, Settings};
use spamri::eval::{run_benchmark_with, Method};
use spamri::masks::Pattern;

fn spamri(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spamri"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spamri(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

const FAST: [&str; 8] = [
    "--set",
    "denoiser.kind=gaussian",
    "--set",
    "denoiser.fit_samples=20",
    "--set",
    "sampler.reverse_steps=8",
    "--set",
    "sampler.inversion_steps=3",
];

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(spamri(&[]).status.code(), Some(1));
    assert_eq!(spamri(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(spamri(&["--help"]).status.code(), Some(0));
    assert_eq!(spamri(&["--version"]).status.code(), Some(0));
}

#[test]
fn bad_setting_is_a_usage_error() {
    let out = spamri(&["--set", "sampler.eta=abc", "--print-config"]);
    assert_eq!(out.status.code(), Some(1));
    let out = spamri(&["--set", "nonsense.key=1", "--print-config"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["--set", "consistency.xi=2.5", "--print-config"]);
    let path = p(dir.path(), "settings.cfg");
    std::fs::write(&path, &text).unwrap();
    assert_eq!(ok(&["--config", &path, "--print-config"]), text);
}

#[test]
fn missing_input_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = spamri(&[
        "reconstruct",
        "--method",
        "zero-filled",
        "--kspace",
        &p(dir.path(), "absent.cxg"),
        "--mask",
        &p(dir.path(), "absent_mask.cxg"),
        "-o",
        &p(dir.path(), "x.cxg"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mask_reports_effective_acceleration() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "mask", "--pattern", "uniform", "--accel", "4", "--acs", "4", "--seed", "0", "-o",
        &p(dir.path(), "m.cxg"),
    ]);
    assert_eq!(out.trim(), "effective_acceleration = 4");
}

#[test]
fn diffusion_methods_need_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["phantom", "--seed", "1", "--h", "32", "--w", "32", "-o", &p(d, "x.cxg")]);
    ok(&["mask", "--pattern", "gaussian", "--accel", "4", "--acs", "4", "--h", "32", "--w", "32", "--seed", "1", "-o", &p(d, "m.cxg")]);
    ok(&["acquire", "--image", &p(d, "x.cxg"), "--mask", &p(d, "m.cxg"), "-o", &p(d, "y.cxg")]);
    let out = spamri(&["reconstruct", "--method", "spa", "--kspace", &p(d, "y.cxg"), "--mask", &p(d, "m.cxg"), "-o", &p(d, "r.cxg")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_filled_full_mask_recovers_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["phantom", "--seed", "3", "--h", "32", "--w", "32", "-o", &p(d, "x.cxg")]);
    ok(&["coils", "--n", "4", "--h", "32", "--w", "32", "--seed", "3", "-o", &p(d, "c.cxg")]);
    ok(&["mask", "--pattern", "uniform", "--accel", "1", "--h", "32", "--w", "32", "--seed", "3", "-o", &p(d, "m.cxg")]);
    ok(&["acquire", "--image", &p(d, "x.cxg"), "--mask", &p(d, "m.cxg"), "--coils", &p(d, "c.cxg"), "-o", &p(d, "y.cxg")]);
    ok(&["reconstruct", "--method", "zero-filled", "--kspace", &p(d, "y.cxg"), "--mask", &p(d, "m.cxg"), "--coils", &p(d, "c.cxg"), "-o", &p(d, "r.cxg")]);
    let out = ok(&["eval", "--recon", &p(d, "r.cxg"), "--reference", &p(d, "x.cxg")]);
    let psnr = out.lines().nth(1).unwrap().split(',').next().unwrap();
    assert!(psnr == "inf" || psnr.parse::<f64>().unwrap() >= 100.0, "{out}");
}

#[test]
fn reconstruct_is_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["phantom", "--seed", "5", "--h", "32", "--w", "32", "-o", &p(d, "x.cxg")]);
    ok(&["mask", "--pattern", "radial", "--accel", "4", "--h", "32", "--w", "32", "--seed", "5", "-o", &p(d, "m.cxg")]);
    ok(&["acquire", "--image", &p(d, "x.cxg"), "--mask", &p(d, "m.cxg"), "-o", &p(d, "y.cxg")]);
    for out in ["a.cxg", "b.cxg"] {
        let mut args = FAST.to_vec();
        let (y, m, o) = (p(d, "y.cxg"), p(d, "m.cxg"), p(d, out));
        args.extend(["reconstruct", "--method", "spa", "--kspace", &y, "--mask", &m, "--seed", "11", "-o", &o]);
        ok(&args);
    }
    let a = std::fs::read(d.join("a.cxg")).unwrap();
    let b = std::fs::read(d.join("b.cxg")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn file_pipeline_matches_benchmark_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (seed, accel) = ("7", 4.0f64);
    let acs = (32.0 / (2.0 * accel)).floor().to_string();
    ok(&["phantom", "--seed", seed, "--h", "32", "--w", "32", "--ellipses", "10", "-o", &p(d, "x.cxg")]);
    ok(&["coils", "--n", "4", "--h", "32", "--w", "32", "--seed", seed, "-o", &p(d, "c.cxg")]);
    ok(&["mask", "--pattern", "gaussian", "--accel", "4", "--acs", &acs, "--h", "32", "--w", "32", "--seed", seed, "-o", &p(d, "m.cxg")]);
    ok(&["acquire", "--image", &p(d, "x.cxg"), "--mask", &p(d, "m.cxg"), "--coils", &p(d, "c.cxg"), "-o", &p(d, "y.cxg")]);
    let mut args = FAST.to_vec();
    let (y, m, c, r) = (p(d, "y.cxg"), p(d, "m.cxg"), p(d, "c.cxg"), p(d, "r.cxg"));
    args.extend(["reconstruct", "--method", "spa", "--kspace", &y, "--mask", &m, "--coils", &c, "--seed", seed, "-o", &r]);
    ok(&args);
    let out = ok(&["eval", "--recon", &r, "--reference", &p(d, "x.cxg")]);
    let cli: Vec<f64> = out.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();

    let mut s = Settings::default();
    for kv in FAST.iter().skip(1).step_by(2) {
        let (k, v) = kv.split_once('=').unwrap();
        s.set(k, v).unwrap();
    }
    assert_eq!(s.denoiser_kind, DenoiserKind::Gaussian);
    let mut cfg = s.bench_config();
    cfg.patterns = vec![Pattern::Gaussian];
    cfg.accels = vec![accel];
    cfg.seeds = vec![7];
    cfg.methods = vec![Method::Spa];
    cfg.height = 32;
    cfg.width = 32;
    cfg.coils = 4;
    cfg.output_dir = None;
    let schedule = s.schedule().unwrap();
    let den = s.build_denoiser_for(&schedule, 32, 32).unwrap();
    let report = run_benchmark_with(&cfg, den.as_ref(), &schedule).unwrap();
    let row = &report.rows[0];
    assert!((row.psnr_db - cli[0]).abs() < 1e-5, "{} vs {}", row.psnr_db, cli[0]);
    assert!((row.ssim - cli[1]).abs() < 1e-5, "{} vs {}", row.ssim, cli[1]);
}
