//! Off-policy evaluation of forward and backward general value functions (GVFs) with
//! causal filtering on tabular MDPs.
//!
//! The crate assembles block general Bellman operators, solves them exactly, and learns
//! them from off-policy samples with GenTD (value update reweighted by a jointly learned
//! density ratio) or a gradient-TD baseline.

pub mod approx;
pub mod cases;
pub mod density_ratio;
pub mod error;
pub mod gvf;
pub mod harness;
pub mod learners;
pub mod mdp;

pub use error::{Error, Result};
