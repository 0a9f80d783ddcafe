use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("calibration failed at theta={theta:?}, z={z:?}: non-finite model value")]
    Calibration { theta: Vec<f64>, z: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("singular normal matrix in Gauss-Newton step (condition estimate {condition:.3e})")]
    SingularNormal { condition: f64 },

    #[error("Sigma_0 is not positive definite; parameters are not identifiable on this design")]
    NotIdentifiable,

    #[error("degenerate variance estimate (gamma_hat = {value:.3e}); kernels do not overlap, use a larger h")]
    DegenerateVariance { value: f64 },

    #[error("too many failed replications: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
