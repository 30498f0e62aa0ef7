//! Guided attention map editing on a toy decoder-only transformer.

pub mod checkpoint;
pub mod classifier;
pub mod edit;
pub mod error;
pub mod experiment;
pub mod features;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod tasks;
pub mod train;

pub use error::{GameError, Result};
