//! Vanishing-discount limits for controlled diffusions with `z`-dependent costs.
//!
//! Core algorithms: problem models, SDE simulation, infinite-horizon BSDE
//! solvers, discounted HJB schemes, limit diagnostics, condition checks and
//! the g-expectation representation of the limit.

pub mod error;
pub mod expr;
pub mod model;
pub mod report;
pub mod rng;
pub mod sde;
pub mod bsde;
pub mod hjb;
pub mod limit;
pub mod conditions;
pub mod representation;

pub use error::{Error, ExprError, Result};
pub use model::{builtin_problem, lipschitz_audit, parse_problem, resolve_problem, Constants, ControlProblem, Domain, SplitForm};
pub use report::{Check, ConditionReport, Status, Witness};
pub use sde::{ConstantPolicy, PathCloud, Policy, StatePath};
pub use bsde::{BsdeConfig, BsdePath, GExpectationResult};
pub use hjb::{FeedbackPolicy, Grid, SolverConfig, ValueField};
pub use limit::LambdaSweep;
pub use conditions::{FeedbackSelector, GirsanovWeight, ProbeConfig};
pub use representation::{RepresentationConfig, RepresentationResult};
