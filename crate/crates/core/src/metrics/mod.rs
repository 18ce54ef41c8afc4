//! Numeric kernels: similarity, diversity, fairness and reliability
//! distributions.

mod kde;
mod similarity;

pub use kde::{
    compare_distributions, compare_modal, estimate_distribution, scott_bandwidth, DistributionShift, ModalSummary,
    ReliabilityDistribution, DEFAULT_GRID_POINTS, GRID_HEADROOM,
};
pub use similarity::{cosine, diversity, fairness, fairness_from_cosine, fairness_single, SimilarityMatrix};
