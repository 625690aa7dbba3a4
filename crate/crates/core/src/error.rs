use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Error, Debug)]
pub enum Error {
    /// Operand shapes are inconsistent (matrix/stack dimension mismatch).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// The optimizer produced a non-finite loss.
    #[error("optimization diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    /// An analytical precondition does not hold for the requested inputs.
    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
