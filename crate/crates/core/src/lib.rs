//! Robust distributional regression under the smooth generalized normal
//! distribution, with variable selection by a smooth information criterion.

pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod optimizer;
pub mod quadrature;
pub mod sgnd;
pub mod simulation;

pub use error::{Error, Result};
pub use inference::{
    bootstrap_se, confidence_intervals, delta_bic, delta_bic_with, normal_quantile, sandwich_cov, BootstrapResult, Component,
    CovarianceResult, DeltaComponent, ParamLabel, RefitSupport,
};
pub use model::{standardize, unscale_theta, Criterion, Dataset, PenaltySpec, ThetaVector};
pub use optimizer::{telescope_fit, Family, FitConfig, FitResult, FreeMask, Mode, TelescopeConfig};
pub use sgnd::{NormConstEval, SgndSampler, SgndShape};
pub use simulation::{run_study, MetricsSummary, SimScenario};
pub use io::{read_csv, DensityCurveRequest, RunConfig};
