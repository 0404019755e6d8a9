//! Demand dispatch: a population of on/off loads tracks a grid regulation
//! signal under randomized local control, while per-load quality of service
//! is measured, approximated spectrally, and hard-bounded by opt-out control.
//!
//! The crate is organized around the simulation pipeline:
//!
//! - [`load_model`]: finite-state load with an exponentially tilted
//!   controlled transition matrix and its derivatives.
//! - [`mean_field`]: deterministic population limit, stationary analysis, and
//!   the linear state-space approximation.
//! - [`qos`]: per-load quality-of-service metrics, filters, and the opt-out
//!   guard that enforces hard bounds.
//! - [`signals`]: ARMA modeling of the regulation signal, low-pass
//!   conditioning, scaling, and reference reshaping.
//! - [`control`]: the grid-level PI feedback and the closed-loop map used by
//!   spectral analysis.
//! - [`spectral`]: analytic second-order QoS statistics and empirical PSD
//!   estimation.
//! - [`sim`]: experiment orchestration, metrics, sweeps, and file output.

pub mod control;
pub mod error;
pub mod load_model;
pub mod mean_field;
pub mod qos;
pub mod signals;
pub mod sim;
pub mod spectral;

pub use error::{DispatchError, Result};
