//! Filter pruning driven by feature-map statistics.
//!
//! The pipeline reads activation dumps ([`tensorio`]), computes per-channel
//! diversity and similarity statistics ([`stats`]), selects channels to keep
//! with a global diversity threshold followed by a greedy similarity pass
//! ([`select`]), propagates the resulting [`plan::PruningPlan`] through the
//! model graph ([`graph`]) and finally slices the weights ([`surgery`]).

pub mod cli;
pub mod graph;
pub mod plan;
pub mod select;
pub mod stats;
pub mod surgery;
pub mod tensorio;

pub use graph::ModelGraph;
pub use plan::PruningPlan;
pub use select::PruneConfig;
pub use stats::{FeatureStats, SimilarityMatrix};
pub use tensorio::{ActivationSet, TensorFile};
