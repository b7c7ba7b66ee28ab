//! The learned construction policy: a graph encoder over the neighborhood
//! graph, a per-slot context encoder and a single-head attention decoder,
//! trained with REINFORCE.

pub mod checkpoint;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

use thiserror::Error;

use crate::construct::ConstructError;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use model::{decode_scores, encode_context, encode_dynamic, encode_static, ModelConfig, NeuralScorer, Parameters};
pub use tensor::Tensor;
pub use train::{gradient_check, reinforce_step, replay_loss_and_gradient, sample_trajectories, Sgd, StepStats, TrainConfig, TrajectoryRecord};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("corrupt checkpoint: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite values during training:\n{0}")]
    NonFinite(String),
    #[error("replay failed: {0}")]
    Replay(String),
    #[error(transparent)]
    Construct(#[from] ConstructError),
}
