//! Incremental volumetric occupancy mapping with semantic scene completion.
//!
//! The front end fuses depth frames into a sparse, block-hashed log-odds
//! occupancy map. The back end covers each view frustum with fixed-lattice
//! 64^3 sub-maps, hands dense occupancy/mask snapshots to a pluggable
//! completion backend, fuses the predicted labels and geometry back into the
//! map under a state-aware policy, and regularizes labels with a fully
//! connected CRF over voxel positions.

pub mod completion;
pub mod crf;
pub mod eval;
pub mod integration;
pub mod io;
pub mod map;
pub mod pipeline;
pub mod sensor;
pub mod submap;
pub mod synth;

use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("map capacity exhausted at {0} blocks")]
    MapCapacity(usize),
    #[error("grid misalignment: {0}")]
    Misaligned(String),
    #[error("backend {backend}: {reason}")]
    Backend { backend: String, reason: String },
    #[error("external protocol: {0}")]
    Protocol(String),
    #[error("external backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
