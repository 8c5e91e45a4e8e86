//! Multi-scale graph-attention multiple-instance learning for predicting
//! slide-level tumor mutational burden status from tiled histopathology,
//! with the statistics used to evaluate it.

pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod heatmap;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod training;
pub mod types;

pub use error::{Error, Result};
