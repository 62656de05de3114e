//! Training and inference engine for multi-view echo clip classification.
//!
//! The crate is organized around a flat autodiff tape ([`graph::Graph`]):
//! convolutional backbones ([`models`]) turn per-frame images into feature
//! vectors, clip aggregators ([`aggregation`]) reduce a variable number of
//! frames to one study-level prediction, and [`train`] drives optimization.
//! Everything runs on plain slices — no external tensor runtime.

pub mod aggregation;
pub mod bench;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod preprocess;
pub mod tensor;
pub mod saliency;
pub mod train;
pub mod viewrouter;

pub use error::{CoreError, Result};
