//! A small dense-tensor engine: tape-based reverse-mode differentiation,
//! linear layers, Adam, and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Linear, Mlp};
pub use optim::Adam;
pub use params::{ModelParams, ParamId, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::Tensor;
