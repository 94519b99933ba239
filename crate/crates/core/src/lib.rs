//! Federated time-series forecasting where clients exchange only discrete
//! prototype memories.
//!
//! Each client trains a channel-independent patch forecaster whose latent
//! patches are snapped to the nearest row of a local prototype memory. After
//! every round the server aligns the uploaded memories across domains by
//! cosine-similarity clustering, pools cluster centroids into a shared block,
//! and completes each domain's memory with its own most useful, least
//! redundant prototypes.
//!
//! Module map:
//!
//! - [`data`]: CSV ingestion, splits, sliding windows, instance normalization, patching
//! - [`memory`]: the prototype codebook, nearest-prototype retrieval, quantization losses
//! - [`model`]: encoder / decoder with hand-derived gradients, Adam, local training
//! - [`server`]: similarity graph, BFS clustering, shared and personalized selection
//! - [`federation`]: run configuration, rounds, noise injection, early stopping, reports
//! - [`synthetic`], [`gradcheck`], [`inspect`]: tooling behind the CLI

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod inspect;
pub mod memory;
pub mod model;
pub mod seed;
pub mod server;
pub mod synthetic;

pub use error::{Error, Result};
