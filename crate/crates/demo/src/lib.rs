//! Browser demo: phantom generation, mask generation and a small
//! reconstruction with a fitted Gaussian prior.

use spamri::denoiser::{AnalyticDenoiser, GaussianPrior};
use spamri::eval::{cell_inputs, gen_phantom, phantom_dataset, score, unit_magnitude, BenchConfig, Method};
use spamri::grid::ComplexGrid;
use spamri::masks::{gen_mask, Pattern};
use spamri::sampler::ReconConfig;
use spamri::schedule::cosine_schedule;
use wasm_bindgen::prelude::*;

const PRIOR_SAMPLES: u64 = 64;
const SCHEDULE_STEPS: usize = 1000;

fn magnitude(x: &ComplexGrid) -> Vec<f32> {
    unit_magnitude(x).data().iter().map(|z| z.re as f32).collect()
}

pub fn phantom_image(size: usize, seed: u64) -> spamri::Result<Vec<f32>> {
    Ok(magnitude(&gen_phantom(size, size, seed, 10)?.image))
}

pub fn mask_image(pattern: &str, accel: f64, size: usize, seed: u64) -> spamri::Result<Vec<u8>> {
    let pattern: Pattern = pattern.parse()?;
    let acs = (size as f64 / (2.0 * accel)).floor() as usize;
    let m = gen_mask(pattern, size, size, accel, acs, seed)?;
    Ok(m.to_tensor().into_bytes()?.1)
}

/// Output of [`reconstruct`]: unit-max magnitudes plus quality numbers.
#[wasm_bindgen]
pub struct Reconstruction {
    image: Vec<f32>,
    zero_filled: Vec<f32>,
    psnr_db: f64,
    ssim: f64,
    nfe: usize,
}

#[wasm_bindgen]
impl Reconstruction {
    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Vec<f32> {
        self.image.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn zero_filled(&self) -> Vec<f32> {
        self.zero_filled.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn psnr_db(&self) -> f64 {
        self.psnr_db
    }
    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
    #[wasm_bindgen(getter)]
    pub fn nfe(&self) -> usize {
        self.nfe
    }
}

pub fn run_reconstruction(
    method: &str,
    pattern: &str,
    accel: f64,
    size: usize,
    seed: u64,
    steps: usize,
) -> spamri::Result<Reconstruction> {
    let method: Method = method.parse()?;
    let cfg = BenchConfig {
        height: size,
        width: size,
        coils: 1,
        ..BenchConfig::default()
    };
    let cell = cell_inputs(&cfg, pattern.parse()?, accel, seed)?;
    let schedule = cosine_schedule(SCHEDULE_STEPS)?;
    let base = 1_000_000;
    let prior = GaussianPrior::fit(&phantom_dataset(size, size, base..base + PRIOR_SAMPLES, 10)?, 1e-3)?;
    let den = AnalyticDenoiser::new(prior, schedule.clone());
    let recon = ReconConfig {
        reverse_steps: steps,
        inversion_steps: (steps / 4).max(1),
        seed,
        ..ReconConfig::default()
    };
    let (x, nfe) = method.reconstruct(&cell.y, &cell.op, &den, &schedule, &recon)?;
    let (psnr_db, ssim) = score(&x, &cell.truth)?;
    Ok(Reconstruction {
        image: magnitude(&x),
        zero_filled: magnitude(&cell.op.zero_filled(&cell.y)?),
        psnr_db,
        ssim,
        nfe,
    })
}

fn js(e: spamri::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Unit-max phantom magnitude, row-major `size * size`.
#[wasm_bindgen]
pub fn phantom(size: usize, seed: u64) -> Result<Vec<f32>, JsError> {
    phantom_image(size, seed).map_err(js)
}

/// Sampling mask as 0/1 bytes, row-major `size * size`.
#[wasm_bindgen]
pub fn mask(pattern: &str, accel: f64, size: usize, seed: u64) -> Result<Vec<u8>, JsError> {
    mask_image(pattern, accel, size, seed).map_err(js)
}

/// Single-coil reconstruction of phantom `seed` with `method`.
#[wasm_bindgen]
pub fn reconstruct(
    method: &str,
    pattern: &str,
    accel: f64,
    size: usize,
    seed: u64,
    steps: usize,
) -> Result<Reconstruction, JsError> {
    run_reconstruction(method, pattern, accel, size, seed, steps).map_err(js)
}
