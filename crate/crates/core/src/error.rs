use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid tree configuration at vertex {vertex}: {reason}")]
    InvalidConfig { vertex: String, reason: String },

    #[error("invalid vertex address {path:?}: {reason}")]
    Address { path: Vec<u32>, reason: String },

    #[error("depth cap exceeded: {0}")]
    Cap(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("mode mismatch: expected {expected}, found {found}")]
    Mode { expected: &'static str, found: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible schedule: {0}")]
    Schedule(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
