//! Ranking-based backward compatible embedding training.
//!
//! A new embedding model is trained so that its query features can be
//! retrieved directly against a gallery that an older, frozen model already
//! indexed. The compatibility objective is a smoothed mean Average Precision
//! computed between new-model queries and old-model galleries, with two
//! refinements:
//!
//! - **Dynamic gradient reactivation** compresses every triplet term
//!   `d = s_in - s_ij` toward the narrow interval where the ranking sigmoid
//!   still has useful slope, by adding a per-term constant during the forward
//!   pass only.
//! - **Neighbor context agents** build the gallery for each step from one
//!   random old feature per class in the neighborhood of every class present
//!   in the mini-batch.
//!
//! The crate also ships the usual baselines (L2, MMD, old-classifier
//! distillation, triplet alignment), retrieval metrics, small MLP encoders
//! with hand-written backward passes, synthetic identity datasets and the
//! experiment runner behind the `rbcl` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod featurespace;
pub mod losses;
pub mod model;
pub mod oracles;
pub mod trainer;

pub use error::{Error, Result};

/// Identity label of an instance.
pub type ClassId = u32;
/// Unique identifier of a single instance (image, in the re-ID setting).
pub type InstanceId = u64;
