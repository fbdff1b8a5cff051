//! End-to-end checks through the public API: simulate an acquisition,
//! reconstruct it and score the result.

use approx::assert_relative_eq;
use spamri::config::Settings;
use spamri::denoiser::{
    train_tiny_denoiser, AnalyticDenoiser, GaussianPrior, Preconditioner, TinyDenoiserWeights, TrainConfig,
};
use spamri::encoding::{gen_coil_maps, EncodingOperator};
use spamri::eval::{gen_phantom, phantom_dataset, psnr, run_benchmark_with, BenchConfig, Method};
use spamri::masks::{gen_gaussian_mask, Pattern, SamplingMask};
use spamri::sampler::{ddnm_sample, spa_mri_sample, ReconConfig};
use spamri::schedule::cosine_schedule;

fn gaussian_denoiser(h: usize, w: usize, steps: usize) -> AnalyticDenoiser {
    let s = cosine_schedule(steps).unwrap();
    let data = phantom_dataset(h, w, 500..540, 6).unwrap();
    AnalyticDenoiser::new(GaussianPrior::fit(&data, 1e-4).unwrap(), s)
}

#[test]
fn multicoil_operator_is_adjoint_on_phantoms() {
    let x = gen_phantom(24, 24, 3, 6).unwrap().image;
    let mask = gen_gaussian_mask(24, 24, 4.0, 4, 9).unwrap();
    let op = EncodingOperator::new(mask, gen_coil_maps(4, 24, 24, 2).unwrap()).unwrap();
    let y = op.forward(&gen_phantom(24, 24, 4, 6).unwrap().image).unwrap();
    let lhs = op.forward(&x).unwrap().inner(&y).unwrap();
    let rhs = x.inner(&op.adjoint(&y).unwrap()).unwrap();
    assert_relative_eq!(lhs.re, rhs.re, max_relative = 1e-9);
    assert_relative_eq!(lhs.im, rhs.im, max_relative = 1e-9);
}

#[test]
fn fully_sampled_acquisition_is_recovered_by_both_samplers() {
    let den = gaussian_denoiser(16, 16, 1000);
    let truth = gen_phantom(16, 16, 77, 6).unwrap().image;
    let op = EncodingOperator::single_coil(SamplingMask::full(16, 16));
    let y = op.forward(&truth).unwrap();
    let cfg = ReconConfig {
        reverse_steps: 40,
        inversion_steps: 8,
        ..ReconConfig::default()
    };
    let s = den.schedule().clone();
    for (name, x) in [
        ("spa", spa_mri_sample(&y, &op, &den, &s, &cfg).unwrap().0),
        ("ddnm", ddnm_sample(&y, &op, &den, &s, &cfg).unwrap().0),
    ] {
        let p = psnr(&x, &truth).unwrap().db();
        assert!(p >= 40.0, "{name}: {p} dB");
    }
}

#[test]
fn benchmark_rows_cover_the_grid_and_repeat_exactly() {
    let den = gaussian_denoiser(16, 16, 200);
    let cfg = BenchConfig {
        patterns: vec![Pattern::Gaussian, Pattern::Radial],
        accels: vec![4.0],
        seeds: vec![1, 2],
        height: 16,
        width: 16,
        coils: 2,
        panels: false,
        recon: ReconConfig {
            reverse_steps: 6,
            inversion_steps: 2,
            ..ReconConfig::default()
        },
        ..BenchConfig::default()
    };
    let s = den.schedule().clone();
    let a = run_benchmark_with(&cfg, &den, &s).unwrap();
    let b = run_benchmark_with(&cfg, &den, &s).unwrap();
    assert_eq!(a.rows.len(), 2 * 2 * Method::ALL.len());
    let strip = |csv: String| -> Vec<String> {
        csv.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip(a.to_csv()), strip(b.to_csv()));
}

#[test]
fn default_settings_survive_a_text_round_trip() {
    let s = Settings::default();
    assert_eq!(Settings::from_text(&s.to_text()).unwrap(), s);
}

#[test]
fn trained_weights_survive_a_file_round_trip() {
    let s = cosine_schedule(100).unwrap();
    let data = phantom_dataset(16, 16, 0..4, 4).unwrap();
    let cfg = TrainConfig { batch_size: 2, ..TrainConfig::new(1, 1e-3, 3) };
    let (w, _) = train_tiny_denoiser(&data, &s, &cfg).unwrap();
    let p: &Preconditioner = w.preconditioner().unwrap();
    assert_eq!(p.alpha_bar.len(), 100);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.spaw");
    w.save(&path).unwrap();
    assert_eq!(TinyDenoiserWeights::load(&path).unwrap(), w);
}
