//! Recurrent memory decision trees.
//!
//! Hard, axis-aligned decision trees that read and write a continuous hidden
//! memory, trained end to end with straight-through gradients and
//! backpropagation through time.

pub mod datagen;
pub mod diffcore;
pub mod treecore;
pub mod remede;
pub mod training;
pub mod eval;
pub mod cli;
