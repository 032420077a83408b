//! Marginal logistic regression for clustered and multilevel binary data
//! under a correlated gamma frailty model.

pub mod data;
pub mod error;
pub mod estimation;
pub mod frailty;
pub mod io;
mod linalg;
pub mod mc;
pub mod mle;
pub mod model;
pub mod variance;
pub mod verify;

pub use data::{ClusterData, Dataset, Mode, Observation};
pub use error::{Error, Result};
pub use estimation::{
    composite_loglik, composite_score_rho, fit, gee_score, solve_beta, solve_rho, FitMode,
    FitResult, SolverConfig,
};
pub use frailty::{derive_seed, simulate_dataset, DgpConfig, DgpKind, Scenario, SizeLaw};
pub use model::{CorrelationStructure, StructureKind, Theta};
pub use variance::{joint_sandwich, model_based_cov, robust_cov, wald_ci, CovarianceReport};
