//! Two-tier 5G city simulation.
//!
//! A detailed single-cell mmWave packet simulator ([`cellsim`]) is swept over
//! a grid of cell conditions. Per-point KPI samples are fitted with parametric
//! distributions ([`distfit`]) and a regression over the condition space
//! ([`surrogate`]) turns those fits into a KPI generator usable at any cell
//! condition. A one-way urban activity simulator ([`urban`]) produces per-cell
//! intervals of constant conditions, and the [`orchestrator`] draws per-packet
//! KPIs for every interval, aggregating them into user, network and vertical
//! KPIs. [`validate`] compares surrogate output against the detailed simulator.

// `!(x > 0.0)` is how NaN gets rejected throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cellsim;
pub mod channel;
pub mod distfit;
pub mod error;
pub mod orchestrator;
pub mod seed;
pub mod stats;
pub mod surrogate;
pub mod traffic;
pub mod urban;
pub mod validate;

pub use error::{Error, Result};
