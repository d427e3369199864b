use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("model violates assumptions: {0}")]
    Assumption(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("numerical overflow in {what} at node {node} (t = {t})")]
    Overflow { what: &'static str, node: usize, t: f64 },

    #[error("integration failed in {what} at node {node} (t = {t})")]
    Integration { what: &'static str, node: usize, t: f64 },

    #[error("Fisher information {value:e} below floor {floor:e}")]
    SingularInformation { value: f64, floor: f64 },

    #[error("rescaling failed: {0}")]
    Rescaling(String),

    #[error("{failed} of {total} replications failed (limit 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Overflow { .. }
                | Error::Integration { .. }
                | Error::SingularInformation { .. }
                | Error::Rescaling(_)
        )
    }
}
