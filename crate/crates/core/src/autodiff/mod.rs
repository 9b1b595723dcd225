//! Dense-tensor reverse-mode differentiation, parameter storage and Adam.

pub mod check;
mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{AdamConfig, FreezeMask, ParamStore};
pub use tensor::{numel, Tensor};

pub(crate) use params::{read_u32, read_u64};
