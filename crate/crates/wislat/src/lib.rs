//! Passive Wi-Fi sensing toolkit: joint localization of receive stations and
//! tracking of a moving target from per-station bistatic Doppler shifts.
//!
//! The pipeline has three layers:
//!
//! * [`csi`] — synthetic channel-state generation, cross-antenna ratio and
//!   the short-time-Fourier Doppler detector that turns raw CSI streams into
//!   per-interval Doppler matrices;
//! * [`ekf`] — an extended Kalman filter that reconstructs a target
//!   trajectory from a Doppler matrix given a hypothesized starting point and
//!   station layout;
//! * [`solver`] — the alternate-optimization solver that searches over
//!   starting points and layouts, initializes stations from ray geometry and
//!   refines everything with damped Gauss-Newton steps.
//!
//! [`harness`] wraps the layers into reproducible simulation experiments and
//! [`geometry`] holds the shared scene types and the forward Doppler model.

pub mod config;
pub mod csi;
pub mod ekf;
pub mod harness;
pub mod error;
pub mod geometry;
pub mod solver;

pub use error::{Error, Result};
