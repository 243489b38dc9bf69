use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed (factorization, root solving, regression).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A call price lies on or outside the no-arbitrage bounds.
    #[error("implied vol inversion failed: price {price} violates {bound} bound {value}")]
    Inversion {
        price: f64,
        bound: &'static str,
        value: f64,
    },

    /// The persisted feature cache does not match the requested run.
    #[error("feature cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
