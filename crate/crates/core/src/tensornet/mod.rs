//! Minimal reverse-mode autodiff and neural-network layers.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod schedule;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var, BCE_CLAMP};
pub use layers::{Activation, ForwardCtx, Layer, LayerSpec, Mode};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
