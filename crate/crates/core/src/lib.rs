//! Multi-wave two-phase validation sampling.
//!
//! The crate covers the full loop of a validation study built on top of an
//! error-prone phase-1 dataset:
//!
//! * [`fpca`] derives the exposure (weekly weight gain) from sparse weight
//!   histories and flags suspicious measurements;
//! * [`models`] fits weighted Cox and logistic models and exposes per-record
//!   influence functions;
//! * [`allocation`] turns influence functions into Neyman / multi-wave /
//!   exact integer allocations and draws the sample;
//! * [`raking`] computes IPW and calibrated (raked) estimates;
//! * [`multiframe`] merges two overlapping sampling frames;
//! * [`imputation`] builds multiply-imputed influence auxiliaries;
//! * [`simulator`] generates populations with known truth and runs the
//!   end-to-end Monte Carlo comparison.
//!
//! [`datamodel`] holds the shared record / stratum / ledger types and [`io`]
//! their on-disk formats.

pub mod allocation;
pub mod datamodel;
pub mod error;
pub mod fpca;
pub mod imputation;
pub mod io;
pub mod linalg;
pub mod models;
pub mod multiframe;
pub mod raking;
pub mod rng;
pub mod simulator;
pub mod workflow;

pub use error::{Error, Result};
