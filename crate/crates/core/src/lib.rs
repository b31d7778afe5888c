//! Estimation of generalized additive conditional quantile models
//! `q(x) = G(Σ_u q_u(x_u))` with an unknown link `G` from stationary,
//! serially dependent samples.

pub mod asymptotics;
pub mod basis;
pub mod domain;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod lp;
pub mod dgp;
pub mod link;
pub mod lpq;
pub mod marginals;
pub mod numerics;

pub use basis::MultiIndexBasis;
pub use domain::{validate, Dataset, EstimationBox, FitConfig, FitConfigFile, QuantileLevel, Warning};
pub use error::{Error, Result};
pub use kernels::{MomentMatrices, ScalarKernel, SphericalKernel};
pub use lpq::{fit_local, local_partial, LocalFit, LocalFitter, SolverOptions};
