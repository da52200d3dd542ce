//! Lottery-ticket generation, magnitude pruning and ticket transfer.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod autodiff;
pub mod data;
pub mod kernels;
pub mod model;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod reporting;
pub mod scalar;
pub mod tensor;
pub mod ticket;
pub mod transfer;

pub use autodiff::{AutodiffError, Graph, NodeId};
pub use model::{ModelError, ModelSpec, ParamKind, ParamStore};
pub use network::{backward, forward, Mode};
pub use optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind};
pub use pruning::{prune_global, prune_layerwise, Mask, PermuteMode};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
