//! Estimation of direct and spillover effects in group-randomized experiments
//! under partial interference.
//!
//! The crate is organised around cell means: every unit is mapped to an
//! effective treatment assignment (own treatment plus a summary of the
//! treatment of its group peers), outcomes are averaged within each cell, and
//! all estimands are contrasts of those averages.
//!
//! - [`model`]: assignments, datasets, outcome models, effect vectors.
//! - [`mechanism`]: randomization designs with exact assignment probabilities.
//! - [`estimators`]: cell tables, nonparametric contrasts, regression estimators.
//! - [`oracle`]: closed-form population values of the estimands.
//! - [`inference`]: normal and wild-bootstrap intervals, exchangeability test.
//! - [`design`]: ranking of candidate designs.
//! - [`sim`]: seeded Monte Carlo harness.

pub mod combinatorics;
pub mod design;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod mechanism;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod sim;

pub use error::{Error, Result, Undefined};
pub use mechanism::AssignmentMechanism;
pub use model::{
    enumerate_assignments, AssignmentMode, EffectVector, EffectiveAssignment, Group,
    GroupedDataset, OutcomeModel, Peers, Unit,
};
