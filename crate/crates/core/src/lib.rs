//! Source-space MEG decoding at desk scale.
//!
//! The crate simulates multi-subject sensor recordings from a known forward
//! model, preprocesses them, reconstructs voxel-grid source activity, morphs
//! subjects onto a template grid, and trains voxel- and sensor-space
//! classifiers with spatial augmentations.

pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod experiments;
pub mod features;
pub mod inverse;
pub mod morph;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
