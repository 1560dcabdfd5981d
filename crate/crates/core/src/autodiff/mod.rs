//! From-scratch reverse-mode differentiation: dense arrays, a tape
//! graph, Adam, checkpoints, and finite-difference verification.

mod array;
mod check;
mod graph;
mod optim;
mod params;

pub use array::Array;
pub use check::{grad_check, GradCheckError};
pub use graph::{concat, Graph, Tensor};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{CheckpointError, GradMap, ParamSet};
