//! Multi-view conditional information bottleneck pre-training for paired 2D/3D molecular graphs.

pub mod align;
pub mod encoders;
pub mod evalx;
pub mod expressiveness;
pub mod fragmenter;
pub mod losses;
pub mod model;
pub mod molio;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;

use molio::MolError;
use params::CheckpointError;
use tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("batch of {0} is too small; at least 2 are needed")]
    BatchTooSmall(usize),
    #[error("non-finite loss term {0}")]
    NonFiniteLoss(String),
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("model has no trained head")]
    UntrainedModel,
    #[error("group {0} has fewer than two members")]
    SingletonGroup(String),
    #[error("labels must contain both classes")]
    DegenerateLabels,
    #[error("pair {0} needs 3D coordinates")]
    CoordsRequiredFor3dPairs(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
