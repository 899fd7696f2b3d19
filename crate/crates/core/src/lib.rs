//! Simulation, identification, estimation and guidance for a small planar
//! research vehicle.
//!
//! The crate is organised bottom-up:
//!
//! - [`dynamics`]: state types and the rigid-body model with an RK4 integrator.
//! - [`sim`]: IMU sensor model, excitation signals and mission logs.
//! - [`sysid`]: robust Gauss-Newton parameter identification and covariance estimation.
//! - [`ekf`]: extended Kalman filter over body velocity and acceleration.
//! - [`gnc`]: PD tracking controller, gain tuner and teach-and-repeat guidance.

pub mod dynamics;
pub mod ekf;
pub mod error;
pub mod gnc;
pub mod noise;
pub mod sim;
pub mod sysid;
pub mod table;

pub use error::{Error, Result};
