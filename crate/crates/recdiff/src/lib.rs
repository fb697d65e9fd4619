//! Social recommendation with hidden-space diffusion denoising.
//!
//! The pipeline encodes user-item and user-user graphs with a lightweight
//! GCN, runs a learned diffusion denoiser over the social embeddings, and
//! trains the whole stack jointly with pairwise ranking loss.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod report;
pub mod rng;
pub mod sweep;
pub mod train;
pub mod tape;

pub use error::{Error, Result};
