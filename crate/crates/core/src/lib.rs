//! Continual learning with elastic weight consolidation (EWC) and its
//! rotated variant, where every dense and convolutional layer is wrapped in
//! fixed orthogonal maps that decorrelate its inputs and output gradients so
//! that a diagonal Fisher penalty fits the true curvature more closely.

pub mod checkpoint;
pub mod continual;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fim;
pub mod linalg;
pub mod nn;
pub mod rotation;

pub use error::{Error, Result};
