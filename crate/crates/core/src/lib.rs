//! Coarse primitive-union SDFs and a fine neural SDF sharing one latent
//! space, plus the data preparation, training, editing, rendering and
//! evaluation code around them.

pub mod error;
pub mod geometry;
pub mod manipulate;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod sampling;
pub mod vad;

pub use error::{Error, Result};
