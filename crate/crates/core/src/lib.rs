//! Continuous-time ensemble Kalman–Bucy filtering with correlated signal and
//! observation noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`matrix_kit`]: symmetric linear algebra (spectral decomposition,
//!   pseudo-inverses, empirical moments).
//! - [`model`]: filtering problem declarations and the well-posedness scalars
//!   `γ_t` and `γ̲^M`.
//! - [`sde_sim`]: Euler–Maruyama truth and observation paths.
//! - [`kalman_bucy`]: exact linear-Gaussian mean and Riccati covariance.
//! - [`gain_field_1d`]: consistent Kalman gain and correction drift for an
//!   arbitrary 1-D density.
//! - [`enkbf`]: the interacting particle filters.
//! - [`mean_field_coupling`]: synchronous coupling with mean-field copies for
//!   propagation-of-chaos experiments.
//! - [`diagnostics`]: a-priori covariance bounds and run monitoring.

pub mod diagnostics;
pub mod enkbf;
pub mod error;
pub mod gain_field_1d;
pub mod kalman_bucy;
pub mod matrix_kit;
pub mod mean_field_coupling;
pub mod model;
pub mod noise;
pub mod sde_sim;

pub use error::{Error, Result};
