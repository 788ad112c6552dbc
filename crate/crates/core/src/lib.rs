//! Probe-card structural health monitoring at desk scale: a synthetic
//! frequency-response-function (FRF) data generator, a leakage-safe training
//! pipeline, a from-scratch CNN-Transformer classifier, and attention-based
//! sensor-importance ranking.

pub mod dataset;
pub mod eval;
pub mod importance;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod shadow;
pub mod tensor;
pub mod train;

pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Crate-wide error type. The CLI maps the variants onto exit codes
/// (config 2, data 3, numeric 4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Default training precision.
pub type Tensor32 = Tensor<f32>;
/// Gradient-checking precision.
pub type Tensor64 = Tensor<f64>;

/// Number of candidate sensor locations on the probe head.
pub const SENSOR_COUNT: usize = 28;
/// Number of frequency samples per sensor.
pub const FREQ_POINTS: usize = 150;
/// Number of health-state classes.
pub const CLASS_COUNT: usize = 3;
