//! Hyperbolic compositional regularization for point-cloud classification.
//!
//! Point clouds are encoded by a shared per-point map with max-pooling,
//! lifted into the Poincaré ball and trained with cross-entropy plus a
//! part-whole hierarchy regularizer and a contrastive regularizer.

use std::path::PathBuf;

use thiserror::Error;

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod hypgeo;
pub mod nn;
pub mod optim;
pub mod regularizer;
pub mod run;
pub mod tensor;
pub mod train;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Triplet(#[from] regularizer::TripletError),
    #[error(transparent)]
    Geometry(#[from] hypgeo::GeoError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Optim(#[from] optim::OptimError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code: 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Triplet(_) | Error::Checkpoint(_) | Error::Io { .. } => 3,
            Error::Geometry(_) | Error::Autodiff(_) | Error::Optim(_) | Error::Numerical(_) => 4,
        }
    }
}
