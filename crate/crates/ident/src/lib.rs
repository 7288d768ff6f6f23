//! Linear-Gaussian identifiability lab.

mod assumptions;
mod error;
mod experiment;
mod gaussian;
mod model;
mod recover;

pub use assumptions::{check_assumptions, null_space, AssumptionReport};
pub use error::{IdentError, Result};
pub use experiment::{
    best_permutation, llr_agreement, permute_concepts, run_experiment, run_on, support_threshold, IdentConfig,
    IdentReport, LlrCheck, PermutationReport, RecoveryReport, MAX_PERMUTATION_M,
};
pub use gaussian::{cholesky, Gaussian};
pub use model::{Env, GroundTruth, LinearSem, MBPair, Samples};
pub use recover::{
    coords_of, design_points, fit_quadratic, logistic_regression, recover_from_simulation, recover_mb_oracle,
    recover_mb_samples, Recovery, SampleEstimator,
};
