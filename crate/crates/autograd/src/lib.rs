//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a single-use tape: forward calls append nodes, `backward`
//! walks the tape in reverse and accumulates gradients into every node that
//! requires them. Model parameters live outside the tape in a [`ParamStore`]
//! and are leased into a graph through a [`Binder`], which remembers the
//! name -> node mapping so an optimizer can read gradients back by name.
//!
//! The engine is deliberately f64-only and single-threaded: every operation
//! is bit-deterministic for fixed inputs, which the training and sampling
//! pipelines rely on for reproducibility guarantees.

mod graph;
pub mod init;
pub mod nn;
pub mod optim;
mod store;

pub use graph::{broadcast_shape, Arr, Graph, NodeId};
pub use optim::AdamW;
pub use store::{Binder, BindMode, ParamStore, TrainMask};

use thiserror::Error;

/// Errors raised by graph construction and parameter access.
#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("gradient requested but graph was built without gradients")]
    GradDisabled,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
