//! Simulation and state evolution for general first-order methods on random matrices.
//!
//! The crate runs iterative algorithms `z(t) = A F_t(z(0..t-1)) + G_t(z(0..t-1))` (and
//! their rectangular two-track analogues) on random matrices with independent entries,
//! predicts their entrywise behaviour through Gaussian state evolution, and compares
//! predictions against simulation across entry laws.

pub mod cli_io;
pub mod dynamics;
pub mod ensembles;
pub mod erm;
pub mod error;
pub mod gd_se;
pub mod harness;
pub mod programs;
pub mod seed;
pub mod state_evolution;

pub use error::{Error, Result};
