use thiserror::Error;

/// Errors raised by the simulation, regression and verification layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid: {0}")]
    Grid(String),

    #[error("delay measure: {0}")]
    Measure(String),

    #[error("time {t} is outside the grid [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("model: {0}")]
    Model(String),

    #[error("derivative probe failed for {coefficient} w.r.t. {var}: analytic {analytic:e} vs finite difference {numeric:e}")]
    DerivativeMismatch {
        coefficient: String,
        var: String,
        analytic: f64,
        numeric: f64,
    },

    #[error("finite-difference step underflow for {0}")]
    StepUnderflow(String),

    #[error("non-finite {what} at particle {particle}, step {step}")]
    NonFinite {
        what: &'static str,
        particle: usize,
        step: usize,
    },

    #[error("rank-deficient regression at step {step} ({features} features, ridge {ridge:e}); try a larger ridge")]
    RankDeficient {
        step: usize,
        features: usize,
        ridge: f64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
