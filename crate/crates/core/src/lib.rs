//! Intraday co-movement analysis of stocks.
//!
//! The pipeline turns raw trades into per-day VWAP panels, clusters the
//! stocks every day by three routes (rank correlation with PAM, functional
//! PCA scores and Gaussian kernel PCA scores, both with k-means), counts how
//! often each pair shares a cluster, thresholds those counts into networks
//! and tests pair persistence with one-sided proportion z-tests.

pub mod clustering;
pub mod components;
pub mod error;
pub mod fpca;
pub mod hypothesis;
pub mod kpca;
mod linalg;
pub mod market_data;
pub mod network;
pub mod pipeline;
pub mod rank_correlation;
pub mod synthetic;

pub use chrono::NaiveDate;
pub use clustering::{adjusted_rand_index, choose_k, kmeans, pam, ClusterAssignment, Method};
pub use components::{select_components, Components, ScoreMatrix};
pub use error::{Error, ErrorKind, Result};
pub use fpca::{fit_basis, fpca, BasisSpec, CoefficientMatrix, FpcaResult};
pub use hypothesis::{proportion_ztest, test_report, ProportionTestResult};
pub use kpca::{center_kernel, feature_vectors, gaussian_kernel_matrix, kpca, KernelMatrix, KpcaResult};
pub use market_data::{
    bucket_vwap, filter_universe, parse_ticks, CoverageRule, PricePanel, Session, TickRecord, UniverseReport,
};
pub use network::{build_network, category_matrix, cooccurrence, Category, CoOccurrenceMatrix, NetworkGraph};
pub use rank_correlation::{day_summary, spearman_matrix, to_distance, CorrelationMatrix, DistanceMatrix};
pub use synthetic::{generate, GroundTruth, SyntheticSpec};
