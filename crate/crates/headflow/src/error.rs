//! One error type for the whole crate, grouped by failure domain.
//!
//! The groups matter operationally: the CLI maps them onto distinct process
//! exit codes (I/O and format problems vs. numerical degeneracies vs. oracle
//! transport failures), so constructors should pick the variant by *what went
//! wrong*, not by which module noticed it.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape/dimension disagreement between cooperating values.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration or argument values (before any computation).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Numerical degeneracy: singular systems, all-masked softmax rows,
    /// zero-variance metrics, coincident normalization anchors, and the like.
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    /// A requested quantity does not exist (e.g. no ranking prefix reaches
    /// the faithfulness threshold).
    #[error("not achievable: {0}")]
    NotAchievable(String),

    /// File and serialization problems.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed container/JSON payloads.
    #[error("format: {0}")]
    Format(String),

    /// External-oracle transport failures: protocol violations, timeouts,
    /// process exit. Carries the offending line/context verbatim.
    #[error("oracle transport: {0}")]
    Transport(String),

    /// An error reported by an oracle for a specific query.
    #[error("oracle evaluation: {0}")]
    Oracle(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn transport(msg: impl Into<String>) -> Self {
        Error::Transport(msg.into())
    }
    pub fn oracle(msg: impl Into<String>) -> Self {
        Error::Oracle(msg.into())
    }
    pub fn not_achievable(msg: impl Into<String>) -> Self {
        Error::NotAchievable(msg.into())
    }
}
