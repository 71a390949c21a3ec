//! Minimal reverse-mode autodiff and the WGAN-GP generator/critic pair.

pub mod checkpoint;
pub mod graph;
pub mod loss;
pub mod nets;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, NodeId};
pub use loss::{gradient_penalty, interpolate, wgan_gp_losses, WganLosses, DEFAULT_LAMBDA};
pub use nets::{BoundCritic, Critic, CriticNet, CriticShape, GeneratorNet, GeneratorShape, CHANNELS};
pub use optim::{Adam, AdamConfig};
pub use tensor::{ConvGeom, Tensor};
