//! LiDAR-IMU-Vehicle odometry pre-integration.
//!
//! Between two LiDAR scans the fast sensors (gyro, wheel speed, steering
//! angle) are folded into one body-frame motion increment used to seed scan
//! registration. The yaw rate blends gyro and kinematic steering via a
//! configurable weight, each channel corrected by its bias estimate:
//!
//!   w_i = alpha (gyro_i - b_g) + (1 - alpha) (v_i - b_v) tan(steer_i - b_s) / L
//!
//! Translation is forward-Euler in the body frame of the first sample, each
//! step rotated by the yaw accumulated so far. That makes integration
//! exactly additive: splitting a stream at any shared sample and composing
//! the two increments reproduces the whole-stream increment.

use crate::sim::{ImuSample, VehicleSample};
use crate::types::{wrap_angle, RigidTransform3};
use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BiasModel {
    pub gyro: f64,
    pub speed: f64,
    pub steer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LivParams {
    /// Weight of the gyro channel in the yaw-rate blend, in [0, 1].
    pub alpha: f64,
    pub wheelbase: f64,
    pub bias: BiasModel,
}

impl Default for LivParams {
    fn default() -> Self {
        LivParams {
            alpha: 0.5,
            wheelbase: 3.0,
            bias: BiasModel::default(),
        }
    }
}

impl LivParams {
    pub fn validate(&self) -> Result<(), LivError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LivError::InvalidParameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.wheelbase <= 0.0 {
            return Err(LivError::InvalidParameter(format!(
                "wheelbase must be positive, got {}",
                self.wheelbase
            )));
        }
        Ok(())
    }
}

/// Body-frame motion increment over one integration window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreintegratedDelta {
    pub delta_yaw: f64,
    /// Translation in the body frame of the first sample.
    pub delta_xy: Vector2<f64>,
    /// Time covered, last sample minus first.
    pub span: f64,
    pub steps: usize,
}

impl PreintegratedDelta {
    pub fn identity() -> Self {
        PreintegratedDelta {
            delta_yaw: 0.0,
            delta_xy: Vector2::zeros(),
            span: 0.0,
            steps: 0,
        }
    }

    pub fn to_transform(&self) -> RigidTransform3 {
        RigidTransform3::from_yaw_xy(self.delta_yaw, self.delta_xy.x, self.delta_xy.y)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LivError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("need at least two paired samples, got {0}")]
    TooFewSamples(usize),
    #[error("imu stream has {imu} samples but vehicle stream has {vehicle}")]
    StreamLengthMismatch { imu: usize, vehicle: usize },
    #[error("imu and vehicle timestamps diverge at index {index}: {imu} vs {vehicle}")]
    TimestampMismatch { index: usize, imu: f64, vehicle: f64 },
    #[error("timestamps are not strictly increasing at index {index}")]
    NonMonotonic { index: usize },
}

/// Integrates paired IMU and vehicle streams into one motion increment.
/// The streams must be the same length, time-aligned sample by sample and
/// strictly increasing; the n-th increment uses the n-th sample's rates over
/// the interval to sample n+1 (left Riemann sum).
pub fn integrate(
    imu: &[ImuSample],
    vehicle: &[VehicleSample],
    params: &LivParams,
) -> Result<PreintegratedDelta, LivError> {
    params.validate()?;
    if imu.len() != vehicle.len() {
        return Err(LivError::StreamLengthMismatch {
            imu: imu.len(),
            vehicle: vehicle.len(),
        });
    }
    if imu.len() < 2 {
        return Err(LivError::TooFewSamples(imu.len()));
    }
    for (i, (a, b)) in imu.iter().zip(vehicle.iter()).enumerate() {
        if (a.t - b.t).abs() > 1e-9 {
            return Err(LivError::TimestampMismatch {
                index: i,
                imu: a.t,
                vehicle: b.t,
            });
        }
        if i > 0 && a.t <= imu[i - 1].t {
            return Err(LivError::NonMonotonic { index: i });
        }
    }

    let mut yaw = 0.0f64;
    let mut p = Vector2::zeros();
    for i in 0..imu.len() - 1 {
        let dt = imu[i + 1].t - imu[i].t;
        let v = vehicle[i].speed - params.bias.speed;
        let kinematic = v * (vehicle[i].steer - params.bias.steer).tan() / params.wheelbase;
        let w = params.alpha * (imu[i].gyro_z - params.bias.gyro)
            + (1.0 - params.alpha) * kinematic;

        // rotate this step's forward motion by the yaw accumulated before it
        let (sin_y, cos_y) = yaw.sin_cos();
        p.x += v * cos_y * dt;
        p.y += v * sin_y * dt;
        yaw += w * dt;
    }

    Ok(PreintegratedDelta {
        delta_yaw: yaw,
        delta_xy: p,
        span: imu[imu.len() - 1].t - imu[0].t,
        steps: imu.len() - 1,
    })
}

/// Composes the previous registration result with the pre-integrated
/// increment to seed the next one. If the increment's time span disagrees
/// with the expected scan interval by more than 20 percent the increment is
/// considered unreliable (dropped samples, stalled stream) and the previous
/// transform is reused unchanged.
pub fn initial_guess(
    prev: &RigidTransform3,
    delta: &PreintegratedDelta,
    expected_span: f64,
) -> RigidTransform3 {
    if expected_span > 0.0 {
        let mismatch = (delta.span - expected_span).abs() / expected_span;
        if mismatch > 0.2 {
            log::warn!(
                "pre-integration span {:.4}s disagrees with expected {:.4}s; seeding with the previous transform",
                delta.span,
                expected_span
            );
            return *prev;
        }
    }
    prev.compose(&delta.to_transform())
}

/// Compose two increments measured back to back (b starts where a ended).
pub fn compose_deltas(a: &PreintegratedDelta, b: &PreintegratedDelta) -> PreintegratedDelta {
    let (sin_y, cos_y) = a.delta_yaw.sin_cos();
    PreintegratedDelta {
        delta_yaw: wrap_angle(a.delta_yaw + b.delta_yaw),
        delta_xy: Vector2::new(
            a.delta_xy.x + cos_y * b.delta_xy.x - sin_y * b.delta_xy.y,
            a.delta_xy.y + sin_y * b.delta_xy.x + cos_y * b.delta_xy.y,
        ),
        span: a.span + b.span,
        steps: a.steps + b.steps,
    }
}
