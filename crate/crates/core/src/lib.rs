//! Factor shrinkage priors for Bayesian linear instrumental-variable regression.
//!
//! The pipeline standardizes the instruments, takes a minimum-trace Frisch
//! decomposition of their correlation matrix ([`frisch`]), stacks the leading
//! factor projections on top of the residual instruments ([`design`]), fits a
//! horseshoe regression of the treatment on that enriched design
//! ([`horseshoe`]), and finally reweights the first-stage draws by the
//! outcome's conjugate marginal likelihood ([`iv`]). [`simgen`] and
//! [`harness`] reproduce the simulation studies.

// `!(x > 0.0)` is how NaN inputs get rejected alongside non-positive ones.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod frisch;
pub mod harness;
pub mod horseshoe;
pub mod iv;
pub mod linalg;
pub mod rng;
pub mod simgen;
pub mod stats;

pub use design::{enrich, implied_prior_covariance, CoefficientMap, DesignError, EnrichedDesign};
pub use frisch::{
    psd_project, sample_correlation, solve_min_trace, standardize, truncate_loadings, FrischDecomposition, FrischError,
    LoadingsBasis, RankRule, SolverOptions, Standardization, SymmetricMatrix,
};
pub use harness::{HarnessError, StudyConfig, StudyKind, StudyReport};
pub use horseshoe::{run_chain, ChainConfig, HorseshoeChain, HorseshoeError};
pub use iv::{run_iv, FirstStage, IvConfig, IvError, IvPosterior, NigPrior, ParamSummary};
pub use simgen::{Dataset, RegimeSpec, SimError};
