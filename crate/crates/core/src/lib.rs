//! Continual few-shot image generation with a frozen source generator,
//! per-task teacher/student training, task-specific adapter banks, and
//! similarity-structure (diversity) regularization.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
