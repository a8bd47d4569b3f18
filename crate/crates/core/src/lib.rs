//! Spatially-aware multiple-instance learning for bags of patch embeddings.
//!
//! A slide is a bag of patch feature vectors with 2-d centroids. The graph
//! model refines patch embeddings with graph attention over a k-nearest
//! neighbour graph, pools them with attention into a slide embedding, and is
//! regularized by an auxiliary task that predicts each patch's grid cell.
//! The auxiliary weight is recalibrated every few epochs from a Gamma prior.

pub mod calibrate;
mod codec;
pub mod config;
pub mod data;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod graph;
pub mod jigsaw;
pub mod model;
pub mod params;
pub mod pooling;
pub mod rng;
pub mod trainer;

pub use config::{AuxTask, ModelVariant, TrainConfig};
pub use error::{Error, Result};
pub use graph::{PatchBag, SlideGraph};
pub use model::ModelParams;
