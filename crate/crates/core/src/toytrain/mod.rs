//! Desk-scale training on synthetic occluded lanes.

pub mod net;
pub mod scene;
pub mod train;

use thiserror::Error;

pub use net::{InitOptions, Insertion, LossWeights, NetConfig, NetOutput, StackConfig, TinyNet};
pub use scene::{gen_scene, SceneConfig, SceneError, SyntheticScene};
pub use train::{evaluate, poly_lr, train, EvalSummary, StepMetrics, TrainConfig, TrainRun};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Scnn(#[from] crate::scnn::ScnnError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
