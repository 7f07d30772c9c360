//! Exploratory factor analysis with leave-one-out loading heterogeneity
//! diagnostics and heterogeneity-based regression factor scores.

pub mod analysis;
pub mod data;
pub mod error;
pub mod heterogeneity;
pub mod linalg;
pub mod paf;
pub mod rng;
pub mod rotation;
pub mod scoring;
pub mod simulation;

pub use data::{correlation_from_data, loo_correlation, CorrelationKind, CorrelationMatrix, DataMatrix};
pub use error::{Error, ErrorKind, Result};
pub use paf::{implied_correlation, paf_fit, FactorModel, LoadingMatrix, PafOptions};
pub use rotation::{align_sign, procrustes_target, varimax, RotationResult, VarimaxOptions};
pub use scoring::{
    determinacy_influence, determinacy_population, determinacy_sample, loo_determinacy,
    rfs_scores, rfs_weights, DeterminacyBasis, DeterminacyReport, ScoreKind, ScoreMatrix,
};
