//! Minimal dense-tensor arithmetic with reverse-mode differentiation.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Graph, NodeId};
pub use params::ParamStore;

#[cfg(test)]
mod tests;
