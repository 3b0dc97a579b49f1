//! Dense tensors, reverse-mode autodiff, losses and the optimizer.

mod dense;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod params;
mod tape;

pub use dense::Tensor;
pub use nn::{Graph, LayerNorm, Linear};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamWConfig, AdamWState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
