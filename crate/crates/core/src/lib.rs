//! Joint uplink power and resource-block (RB) allocation.
//!
//! Every user has a long-blocklength (LBT) rate requirement served at
//! Shannon capacity and a short-blocklength (SBT) requirement whose rate
//! carries a finite-blocklength dispersion penalty. The goal is to occupy as
//! few RBs as possible while meeting both requirements for every user.
//!
//! The crate provides:
//! - [`sysmodel`]: configuration, link budget and multipath channel sampling
//! - [`ratecalc`]: rate models, the inverse Q-function and QoS gaps
//! - [`subsetsum`]: cardinality-constrained real subset-sum
//! - [`su_opt`]: the exact hierarchical single-user solver
//! - [`mu_opt`]: the sequential-claim multiuser heuristic
//! - [`oracle`]: exhaustive search for small instances
//! - [`smoothing`]: smoothed discrete operators and their adaptive parameters
//! - [`dataset`]: JSONL channel datasets

pub mod dataset;
mod error;
pub mod mu_opt;
pub mod oracle;
pub mod ratecalc;
pub mod smoothing;
pub mod su_opt;
pub mod subsetsum;
pub mod sysmodel;

pub use error::{Error, Result};
pub use ratecalc::{Allocation, AllocationResult, QosGap, SolveStatus};
pub use sysmodel::{ChannelState, SystemConfig};
