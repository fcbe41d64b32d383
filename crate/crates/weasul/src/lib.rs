//! Weakly supervised dialogue policy learning at desk scale.
//!
//! An agent and a user model converse in self-play; three quality modules
//! (semantic relevance, semantic coherence, consistent flow) weakly annotate
//! every state-action pair; the annotations drive a shaped reward estimator
//! and an entropy-regularized policy update, alternating per training
//! iteration.

pub mod corpus;
pub mod embedder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod quality;
pub mod reward;
pub mod simulation;
pub mod trainer;
pub mod numkit;

pub use error::{Error, Result};
