//! Latent-class linear mixed model: likelihood, fitting, memberships and
//! class trajectory summaries.

mod fit;
mod likelihood;
mod model;
pub mod optimize;
mod summary;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fit::{fit, fit_with_options, posterior_memberships, Convergence, FitOptions, FitResult, MembershipTable};
pub use likelihood::{eye_class_log_density, log_likelihood, log_likelihood_gradient, Model};
pub use model::{
    BasisFn, BetaShape, FixedIntercept, ModelSpec, OptimizerSettings, ParamLayout, Parameters, Slot, SIGMA_FLOOR,
};
pub use optimize::Termination;
pub use summary::{
    class_trajectory_summary, parameter_covariance, ClassSummary, CurvePoint, Estimate, TrajectorySummary,
};

use crate::link::LinkError;

/// Outcome of one optimisation start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartDiagnostic {
    pub index: usize,
    /// Start seeded from caller-supplied parameters.
    pub warm: bool,
    pub loglik: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub termination: Termination,
}

#[derive(Debug, Error)]
pub enum LcmmError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("eye {eye_id}: covariate `{name}` is missing but enters the membership model")]
    MissingCovariate { eye_id: String, name: String },
    #[error("eye {eye_id}: {source}")]
    Link {
        eye_id: String,
        #[source]
        source: LinkError,
    },
    #[error("eye {0}: marginal covariance is not positive definite")]
    NotPositiveDefinite(String),
    #[error("eye {0}: non-finite likelihood term")]
    NonFinite(String),
    #[error("no optimisation start converged ({} starts)", .0.len())]
    AllStartsFailed(Vec<StartDiagnostic>),
}
