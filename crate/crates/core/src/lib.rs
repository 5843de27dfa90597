//! Resilient state estimation and fallback navigation for high-speed track
//! driving.
//!
//! The stack fuses dual GPS/INS units, an IMU, vehicle feedback, and LiDAR
//! scan matching through an extended Kalman filter with per-measurement
//! Bayesian gating. When every localization source degrades at once, a
//! wall-relative navigator keeps the vehicle on a safe path using raw LiDAR
//! alone. A deterministic track simulator drives everything end to end.

pub mod ekf;
pub mod liv;
pub mod localizer;
pub mod mapping;
pub mod metrics;
pub mod registration;
pub mod scenario;
pub mod sim;
pub mod types;
pub mod wall;
