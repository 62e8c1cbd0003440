use thiserror::Error;

/// Errors raised by the geometry, dynamics and scenario layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain of an operation (e.g. projecting the origin).
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller broke a precondition: mismatched dimensions, non-symmetric input, ...
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced or consumed non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The integrator hit a non-finite state.
    #[error("integration aborted at t = {time}: token {token} is not finite")]
    Integration { time: f64, token: usize },

    /// Invalid scenario configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
