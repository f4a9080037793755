//! Simulation and estimation for cascaded radio-over-fiber (RoF) uplinks.
//!
//! A RoF chain is a line of amplify-and-forward radio units (RUs) joined by
//! dispersive fiber segments and terminated by a central unit (CU). A user
//! transmits a known pilot into the nearest RU; the CU estimates how many
//! fiber stages the signal crossed (`r`) and the wireless delay (`tau`).
//!
//! Modules, bottom-up:
//!
//! - [`fiber`]: unit-length fiber responses, cascades, measurement ingestion.
//! - [`signal`]: pilot, wireless link, power amplifiers and noise accumulation.
//! - [`estimation`]: ML grid search and PSO-based nonlinear least squares.
//! - [`crlb`]: Fisher information and Cramér-Rao bounds.
//! - [`positioning`]: three-RoF TOA positioning with clock-offset removal.
//! - [`harness`]: scenario files, seeded Monte Carlo runs and CSV output.

pub mod crlb;
pub mod error;
pub mod estimation;
pub mod fiber;
pub mod harness;
pub mod positioning;
pub mod signal;

mod dsp;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
