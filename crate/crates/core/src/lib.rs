//! Dense object-placement prediction.
//!
//! Given a background and an object image, the model scores every
//! `(x, y, scale)` placement in a single forward pass. The crate also carries
//! the procedural scene generator used for supervision and evaluation, the
//! evaluation protocols, and the training loop.

pub mod error;
pub mod evalsuite;
pub mod geometry;
pub mod heatmap;
pub mod image;
pub mod loss;
pub mod model;
pub mod predict;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
