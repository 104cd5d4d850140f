//! Design and analysis of multi-arm cluster experiments under partial
//! interference: Dirichlet-multinomial randomization, a linear-in-means
//! outcome model, OLS with cluster-robust inference, and a Monte Carlo
//! harness for choosing the treatment intra-cluster correlation.
//!
//! The numerical core is generic over [`Scalar`]; the aliases below fix
//! it to `f64`, which is what sampling and the simulation harness use.

pub mod design;
pub mod dgp;
pub mod error;
pub mod estimate;
pub mod montecarlo;
pub mod randomize;
pub mod rng;
pub mod scalar;

pub use design::{
    AssignmentMode, CiConfig, Contrast, DesignSpec, DgpParams, Estimator, Reference, Z_975,
};
pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Scalar;

pub type Design = design::DesignSpec<f64>;
pub type Params = design::DgpParams<f64>;
pub type Assignment = randomize::AssignmentMatrix<f64>;
pub type Outcomes = dgp::OutcomeMatrix<f64>;
pub type Fit = estimate::FitResult<f64>;
pub type Matrix = estimate::DesignMatrix<f64>;
pub type SobolTable = randomize::SobolDrawTable<f64>;
pub type Cell = montecarlo::CellSummary;
