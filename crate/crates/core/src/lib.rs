//! Equilibrium computation and certification for contextual Fisher markets
//! with CES utilities.
//!
//! A [`Market`] is described by low-dimensional buyer and good contexts from
//! which budgets `B(b) = ||b||`, valuations `v(b, g) = softplus(<b, g>)` and
//! supplies are derived. Candidates `(x, p)` are produced by one of several
//! solvers and certified by the [`metrics`] module:
//!
//! - [`trainer`]: an allocation network `x(b, g)` trained with an augmented
//!   Lagrangian whose minibatch estimate is unbiased, so an optimizer step
//!   costs `O(m)` regardless of the number of buyers.
//! - [`baselines`]: the even-split rule and full-batch gradient methods on
//!   the Eisenberg-Gale program, with and without momentum.
//! - [`oracle`]: closed-form and certified numeric reference equilibria.
//!
//! The [`harness`] module drives experiments end to end and [`properties`]
//! runs the cross-module invariants as a standalone suite.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod ces;
mod error;
pub mod harness;
pub mod history;
pub mod market;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod properties;
pub mod rng;
pub mod trainer;

pub use ces::{BuyerProblem, CesSpec};
pub use error::{Error, Result};
pub use history::{EpochRecord, History};
pub use market::{ContextDistribution, Market};
pub use metrics::{EquilibriumCandidate, MetricsReport};
