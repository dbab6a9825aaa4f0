//! Minimal f64 reverse-mode autodiff, layers, and optimizer.

pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{Grads, Graph, NodeId};
pub use params::{Adam, ParamId, ParamStore};

#[cfg(test)]
mod tests;
