use thiserror::Error;

use crate::sampler::SampleTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed pseudo-real stack: {0}")]
    MalformedStack(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("infeasible mask: {0}")]
    InfeasibleMask(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),
    #[error("unsupported denoiser: {0}")]
    UnsupportedDenoiser(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("sampler diverged at step {step} (t = {t})")]
    Divergence {
        step: usize,
        t: usize,
        trace: Box<SampleTrace>,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
