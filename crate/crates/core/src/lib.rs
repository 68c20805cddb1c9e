//! Adaptive robust mean-variance portfolio control with Bayesian-learned
//! uncertainty sets, solved by regression Monte Carlo over Gaussian-process
//! surrogates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bellman;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod gp;
pub mod market;
pub mod oracle;

pub use bellman::{Decision, Mode, SolvedPolicy, SolverConfig};
pub use error::{Error, Result};
pub use estimation::{ConfidenceRegion, EstimatorState, UncertaintySet};
pub use evaluation::{DecisionRule, EvalResult, Summary};
pub use gp::{FitOptions, KernelParams, SurrogateModel};
pub use market::{AugmentedState, MarketConfig, ObjectiveSpec, ThetaPoint};
pub use oracle::{DiscreteInstance, ExactTables};
