//! Dense networks, optimiser and checkpoint container shared by the dynamics
//! model and the policy.

mod adam;
pub mod checkpoint;
mod mlp;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use mlp::{Activation, ForwardCache, Gradients, Layer, MlpModel};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid network shape: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NnError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }
}
