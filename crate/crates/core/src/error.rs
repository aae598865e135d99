//! Error type shared across the crate.
//!
//! Every failure carries enough context to act on: dimension errors name both
//! shapes, file-format errors say what was expected and what was found, and
//! each variant maps onto one of three coarse kinds so the CLI can translate
//! failures into stable process exit codes.

use std::path::PathBuf;

/// Coarse failure class. The CLI maps these to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad invocation, bad config, or a violated call contract.
    Usage,
    /// Unreadable, malformed, or inconsistent data files.
    Data,
    /// Divergence or other numeric failure during computation.
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: shape {shape:?} holds {expected} values, got {got}")]
    ShapeNumel {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: bad magic, not an STTS file")]
    SttsBadMagic { path: PathBuf },

    #[error("{path}: unsupported STTS version {version}")]
    SttsVersion { path: PathBuf, version: u8 },

    #[error("{path}: truncated, needed {expected} more bytes for {section}, found {got}")]
    SttsTruncated {
        path: PathBuf,
        section: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{path}: header does not match payload: {detail}")]
    SttsHeader { path: PathBuf, detail: String },

    #[error("{path}: calendar channel broken at step {step}: {detail}")]
    SttsCalendar {
        path: PathBuf,
        step: usize,
        detail: String,
    },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no unmasked entries, metrics report would be empty")]
    EmptyReport,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ShapeMismatch { .. }
            | Error::ShapeNumel { .. }
            | Error::Contract(_)
            | Error::IndexOutOfRange { .. }
            | Error::Config(_) => ErrorKind::Usage,
            Error::SttsBadMagic { .. }
            | Error::SttsVersion { .. }
            | Error::SttsTruncated { .. }
            | Error::SttsHeader { .. }
            | Error::SttsCalendar { .. }
            | Error::Checkpoint { .. }
            | Error::Data(_)
            | Error::Io { .. } => ErrorKind::Data,
            Error::Numeric(_) | Error::EmptyReport => ErrorKind::Numeric,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
