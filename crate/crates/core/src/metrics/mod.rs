//! Embedding-quality, realism and rollout-outcome metrics.

mod cluster;
mod distribution;
mod probe;
mod rollouts;

pub use cluster::{clustering_metrics, davies_bouldin, kmeans, silhouette, ClusteringReport, DEFAULT_N_KM};
pub use distribution::wasserstein_1d;
pub use probe::{linear_probe, LinearProbe, ProbeConfig};
pub use rollouts::{
    adversary_pools, classify_interaction, evaluate_rollouts, kinematic_samples, outcome_rates, realism_wd, Causality,
    EvalReport, Geometry, GeometryBins, InteractionConfig, OutcomeRates,
};
