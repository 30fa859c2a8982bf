//! Weight-space analyses.

pub mod assignment;
pub mod dbscan;
pub mod kendall;
pub mod pca;
pub mod regression;
pub mod reorder;
pub mod similarity;

pub use assignment::{assignment_total, solve_assignment};
pub use dbscan::{dbscan, dbscan_outliers};
pub use kendall::kendall_tau;
pub use pca::{pca_project, Projection};
pub use regression::{aggregate_r2, gate_expert_regression, pearson, RegressionReport};
pub use reorder::{mean_tau, reorder_layer, reorder_neurons, ReorderReport};
pub use similarity::{
    cosine_sim, gate_embedding_sim, matrix_level_sim, neuron_average_sim, EntityLabel, Metric,
    SimilarityMatrix,
};
