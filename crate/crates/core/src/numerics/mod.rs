//! Minimal tensor substrate: a dense `f64` [`Tensor`], a recording [`Graph`]
//! for reverse-mode gradients, named [`Parameter`]s and Adam.

mod adam;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod param;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use param::{uniform_fan_in, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
