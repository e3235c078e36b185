//! Deep recurrent networks for next-step sequence prediction.
//!
//! Four families are provided: the conventional RNN, the deep-transition
//! RNN (with optional shortcut connections), the deep-output/deep-transition
//! RNN, and the stacked RNN. Gradients come from exact backpropagation
//! through time and can be checked against central finite differences.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod init;
pub mod math;
pub mod model;
pub mod optimize;
pub mod par;

pub use error::{Error, Result};
pub use grad::{bptt, clip_gradients, finite_difference_grad, GradSet};
pub use math::{Matrix, Nonlinearity, Rng};
pub use model::{build, forward, Architecture, Frame, HiddenState, ModelConfig, OutputHead, ParamSet};
pub use par::Execution;
