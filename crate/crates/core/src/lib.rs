//! Traffic forecasting on a sliding-window tensor pipeline: a small reverse-mode
//! autodiff engine, an attention-based forecaster with learned input embeddings,
//! seeded training, and the analysis probes used to interrogate what the learned
//! embeddings capture.

pub mod analysis;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod stts;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, ErrorKind, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
