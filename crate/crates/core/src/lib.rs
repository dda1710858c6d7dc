//! Seeded graph-diffusion segmentation.
//!
//! Sparse seeds are turned into an importance-weighted seed map and spread
//! over a node grid by a cascade of random walks, one per level of a
//! hierarchical similarity pyramid. A direct linear solve of the limiting
//! diffusion serves as an oracle for the iterative walks.

pub mod binio;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod grid;
pub mod manifest;
pub mod metrics;
pub mod netpbm;
pub mod numeric;
pub mod pipeline;
pub mod seed;
pub mod similarity;
pub mod synth;
pub mod train;
pub mod viz;

pub use config::{validate_config, EngineConfig, Pooling};
pub use error::{Error, Result};
pub use grid::{node_index, Image, LabelMap, NodeGrid, ScoreMap, IGNORE_LABEL};
