//! Spatial slice-wise message passing for lane detection, with a mean-field
//! baseline, cost benchmarks, a toy training loop, curve decoding and
//! IoU-based evaluation.

pub mod corpus;
pub mod costbench;
pub mod lanepost;
pub mod laneval;
pub mod meanfield;
pub mod scnn;
pub mod tensor;
pub mod toytrain;

pub use scnn::{Direction, PropagationConfig, ScnnKernel, ScnnStack, Scheme};
pub use tensor::{Precision, Tensor3};
