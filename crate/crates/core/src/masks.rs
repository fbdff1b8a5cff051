//! Cartesian undersampling masks: phase-encode column masks (uniform and
//! Gaussian-density) with a centered ACS band, and golden-angle radial masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cxg::Tensor;
use crate::error::{Error, Result};

/// Golden angle in radians (about 111.246 degrees).
pub const GOLDEN_ANGLE: f64 = 1.941_678_793_892_170_6;

/// Fully sampled calibration rectangle `(row0, col0, rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcsRect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Gaussian,
    Uniform,
    Radial,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Gaussian => "gaussian",
            Pattern::Uniform => "uniform",
            Pattern::Radial => "radial",
        }
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Pattern::Gaussian),
            "uniform" => Ok(Pattern::Uniform),
            "radial" => Ok(Pattern::Radial),
            other => Err(Error::InvalidParameter(format!("unknown pattern '{other}'"))),
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    h: usize,
    w: usize,
    keep: Vec<bool>,
    acs: Option<AcsRect>,
    nominal_accel: f64,
}

impl SamplingMask {
    pub fn new(
        h: usize,
        w: usize,
        keep: Vec<bool>,
        acs: Option<AcsRect>,
        nominal_accel: f64,
    ) -> Result<Self> {
        if keep.len() != h * w {
            return Err(Error::Shape(format!(
                "mask of {h}x{w} needs {} cells, got {}",
                h * w,
                keep.len()
            )));
        }
        if !(nominal_accel >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "acceleration must be >= 1, got {nominal_accel}"
            )));
        }
        if let Some(r) = acs {
            if r.row0 + r.rows > h || r.col0 + r.cols > w {
                return Err(Error::InfeasibleMask(format!(
                    "ACS rectangle {r:?} exceeds {h}x{w}"
                )));
            }
            for row in r.row0..r.row0 + r.rows {
                for col in r.col0..r.col0 + r.cols {
                    if !keep[row * w + col] {
                        return Err(Error::InfeasibleMask(format!(
                            "ACS cell ({row}, {col}) not kept"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            h,
            w,
            keep,
            acs,
            nominal_accel,
        })
    }

    /// Mask keeping every cell.
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            keep: vec![true; h * w],
            acs: None,
            nominal_accel: 1.0,
        }
    }

    /// Mask keeping nothing; useful only as a degenerate test case, it does
    /// not satisfy the "at least one kept" invariant of generated masks.
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            keep: vec![false; h * w],
            acs: None,
            nominal_accel: f64::INFINITY,
        }
    }

    fn from_columns(h: usize, w: usize, cols: &[bool], acs: Option<AcsRect>, accel: f64) -> Self {
        let mut keep = Vec::with_capacity(h * w);
        for _ in 0..h {
            keep.extend_from_slice(cols);
        }
        Self {
            h,
            w,
            keep,
            acs,
            nominal_accel: accel,
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn keep(&self) -> &[bool] {
        &self.keep
    }
    pub fn acs(&self) -> Option<AcsRect> {
        self.acs
    }
    pub fn nominal_accel(&self) -> f64 {
        self.nominal_accel
    }
    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.w + col]
    }
    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
    pub fn kept_fraction(&self) -> f64 {
        self.kept_count() as f64 / (self.h * self.w) as f64
    }

    /// Indices of columns with at least one kept cell.
    pub fn kept_columns(&self) -> Vec<usize> {
        (0..self.w)
            .filter(|&c| (0..self.h).any(|r| self.is_kept(r, c)))
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::bytes(
            vec![self.h, self.w],
            self.keep.iter().map(|&k| k as u8).collect(),
        )
    }

    /// Rebuilds a mask from a CXG1 u8 tensor. The ACS rectangle is not
    /// stored, and the nominal acceleration is taken to be the realized one.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (dims, bytes) = t.into_bytes()?;
        if dims.len() != 2 {
            return Err(Error::Shape(format!("mask must be 2D, got dims {dims:?}")));
        }
        let keep: Vec<bool> = bytes.iter().map(|&b| b != 0).collect();
        let kept = keep.iter().filter(|&&k| k).count();
        let accel = if kept == 0 {
            f64::INFINITY
        } else {
            (dims[0] * dims[1]) as f64 / kept as f64
        };
        Ok(Self {
            h: dims[0],
            w: dims[1],
            keep,
            acs: None,
            nominal_accel: accel,
        })
    }
}

/// `H * W / kept`.
pub fn effective_acceleration(m: &SamplingMask) -> f64 {
    (m.h * m.w) as f64 / m.kept_count() as f64
}

fn check_dims(h: usize, w: usize, accel: f64) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidParameter(format!("empty mask {h}x{w}")));
    }
    if !(accel >= 1.0) || !accel.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "acceleration must be a finite value >= 1, got {accel}"
        )));
    }
    Ok(())
}

/// Column budget `round(w / accel)` and the centered ACS band.
fn column_budget(h: usize, w: usize, accel: f64, acs_cols: usize) -> Result<(usize, Option<AcsRect>)> {
    check_dims(h, w, accel)?;
    if acs_cols > 0 && acs_cols as f64 >= w as f64 / accel {
        return Err(Error::InfeasibleMask(format!(
            "{acs_cols} ACS columns do not fit the budget of {w}/{accel} columns"
        )));
    }
    let budget = ((w as f64 / accel).round() as usize).clamp(1, w);
    let acs = (acs_cols > 0).then(|| AcsRect {
        row0: 0,
        col0: w / 2 - acs_cols / 2,
        rows: h,
        cols: acs_cols,
    });
    Ok((budget, acs))
}

fn acs_columns(w: usize, acs: Option<AcsRect>) -> Vec<bool> {
    let mut cols = vec![false; w];
    if let Some(r) = acs {
        cols[r.col0..r.col0 + r.cols].iter_mut().for_each(|c| *c = true);
    }
    cols
}

/// Equispaced phase-encode columns plus a centered ACS band, `round(w /
/// accel)` columns in total. Without ACS this is every `accel`-th column
/// starting at column 0.
pub fn gen_uniform_mask(h: usize, w: usize, accel: f64, acs_cols: usize) -> Result<SamplingMask> {
    let (budget, acs) = column_budget(h, w, accel, acs_cols)?;
    let mut cols = acs_columns(w, acs);
    let free: Vec<usize> = (0..w).filter(|&c| !cols[c]).collect();
    let pick = budget.saturating_sub(acs_cols);
    for j in 0..pick {
        cols[free[j * free.len() / pick]] = true;
    }
    Ok(SamplingMask::from_columns(h, w, &cols, acs, accel))
}

/// Columns outside the ACS band drawn without replacement with probability
/// proportional to a Gaussian centered at `w / 2` with std `w / 6`.
pub fn gen_gaussian_mask(
    h: usize,
    w: usize,
    accel: f64,
    acs_cols: usize,
    seed: u64,
) -> Result<SamplingMask> {
    let (budget, acs) = column_budget(h, w, accel, acs_cols)?;
    let mut cols = acs_columns(w, acs);
    let center = (w / 2) as f64;
    let sd = w as f64 / 6.0;
    let mut weights: Vec<f64> = (0..w)
        .map(|c| {
            if cols[c] {
                0.0
            } else {
                (-0.5 * ((c as f64 - center) / sd).powi(2)).exp()
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..budget.saturating_sub(acs_cols) {
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = None;
        for (c, &wt) in weights.iter().enumerate() {
            if wt <= 0.0 {
                continue;
            }
            chosen = Some(c);
            if u < wt {
                break;
            }
            u -= wt;
        }
        let c = chosen.expect("budget never exceeds free columns");
        cols[c] = true;
        weights[c] = 0.0;
    }
    Ok(SamplingMask::from_columns(h, w, &cols, acs, accel))
}

fn rasterize_spoke(keep: &mut [bool], h: usize, w: usize, angle: f64) {
    let (cr, cc) = ((h / 2) as f64, (w / 2) as f64);
    let reach = ((h * h + w * w) as f64).sqrt() / 2.0 + 1.0;
    let (dr, dc) = (angle.sin(), angle.cos());
    let steps = (2.0 * reach / 0.5).ceil() as i64;
    for i in 0..=steps {
        let s = -reach + i as f64 * 0.5;
        let r = (cr + s * dr).round();
        let c = (cc + s * dc).round();
        if r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w {
            keep[r as usize * w + c as usize] = true;
        }
    }
}

fn radial_with_spokes(h: usize, w: usize, theta0: f64, spokes: usize) -> Vec<bool> {
    let mut keep = vec![false; h * w];
    for k in 0..spokes {
        rasterize_spoke(&mut keep, h, w, theta0 + k as f64 * GOLDEN_ANGLE);
    }
    keep
}

/// Golden-angle spokes through the k-space center. The spoke count is found
/// by bisection so that the kept fraction is as close as possible to
/// `1 / accel`; the seed sets the initial angle.
pub fn gen_radial_mask(h: usize, w: usize, accel: f64, seed: u64) -> Result<SamplingMask> {
    check_dims(h, w, accel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta0 = rng.gen::<f64>() * std::f64::consts::PI;
    let target = 1.0 / accel;
    let fraction = |n: usize| {
        let k = radial_with_spokes(h, w, theta0, n);
        k.iter().filter(|&&b| b).count() as f64 / (h * w) as f64
    };
    // Spokes are nested, so the kept fraction is monotone in the spoke count.
    let (mut lo, mut hi) = (1usize, 8 * (h + w));
    if fraction(hi) < target {
        lo = hi;
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if fraction(mid) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let n = if lo > 1 && (fraction(lo - 1) - target).abs() < (fraction(lo) - target).abs() {
        lo - 1
    } else {
        lo
    };
    let keep = radial_with_spokes(h, w, theta0, n);
    Ok(SamplingMask {
        h,
        w,
        keep,
        acs: None,
        nominal_accel: accel,
    })
}

/// Dispatches on `pattern`; `acs_cols` is ignored for radial masks.
pub fn gen_mask(
    pattern: Pattern,
    h: usize,
    w: usize,
    accel: f64,
    acs_cols: usize,
    seed: u64,
) -> Result<SamplingMask> {
    match pattern {
        Pattern::Gaussian => gen_gaussian_mask(h, w, accel, acs_cols, seed),
        Pattern::Uniform => gen_uniform_mask(h, w, accel, acs_cols),
        Pattern::Radial => gen_radial_mask(h, w, accel, seed),
    }
}
