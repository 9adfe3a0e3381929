//! Weather-independent video semantic segmentation training, desk scale.
//!
//! The library implements three cooperating mechanisms: temporal window
//! construction over consecutive frames (instant / integral / derivative
//! channels), seeded global shuffling of those windows into mini-batches,
//! and a K-layer unfolding of two prediction regularizers (Bhattacharyya
//! distance and grouped InfoNCE) whose per-layer weights and step sizes are
//! trained by outer backpropagation. A synthetic weather-sequence generator
//! and the four class-averaged metrics round out a fully runnable pipeline.

pub mod checkpoint;
pub mod error;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod regularizers;
pub mod synthetic;
pub mod unfold;

pub use error::{Error, Result};
