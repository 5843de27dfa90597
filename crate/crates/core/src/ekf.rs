//! Extended Kalman filter over the planar vehicle state with per-source
//! Bayesian measurement gating.
//!
//! State vector: [x, y, theta, b, v, w] where b is a heading bias that
//! absorbs slow yaw-rate offset, and v, w are the body speed and yaw rate
//! carried as random-walk states refreshed from the control stream. The
//! motion model is constant turn rate and velocity:
//!
//!   x += v cos(theta + b) dt,  y += v sin(theta + b) dt,  theta += w dt.
//!
//! Every pose measurement (GPS/INS units, LiDAR scan matching) is scored by
//! its squared Mahalanobis distance against the predicted state; a four-way
//! gate then decides whether to trust one qualified source, blend the
//! feasible set, fall back to the single feasible source, or reject the
//! batch and coast on the motion model alone.

use crate::types::{wrap_angle, Pose2, Timestamp};
use nalgebra::{Matrix3, Matrix6, Matrix6x3, Vector3, Vector6};
use thiserror::Error;

/// Identifies one measurement stream. 0 and 1 are the two GPS/INS units,
/// 2 is LiDAR scan matching; higher values are free for extensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SourceId(pub u8);

impl SourceId {
    pub const GPS0: SourceId = SourceId(0);
    pub const GPS1: SourceId = SourceId(1);
    pub const SCAN: SourceId = SourceId(2);
}

impl std::fmt::Display for SourceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            0 => write!(f, "gps0"),
            1 => write!(f, "gps1"),
            2 => write!(f, "scan"),
            n => write!(f, "src{n}"),
        }
    }
}

/// State indices.
pub const IX: usize = 0;
pub const IY: usize = 1;
pub const ITH: usize = 2;
pub const IB: usize = 3;
pub const IV: usize = 4;
pub const IW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub mean: Vector6<f64>,
    pub covariance: Matrix6<f64>,
}

impl VehicleState {
    pub fn new(mean: Vector6<f64>, covariance: Matrix6<f64>) -> Self {
        VehicleState { mean, covariance }
    }

    /// State at `pose` with a diagonal covariance.
    pub fn from_pose(pose: Pose2, diag: Vector6<f64>) -> Self {
        let mut mean = Vector6::zeros();
        mean[IX] = pose.x;
        mean[IY] = pose.y;
        mean[ITH] = pose.theta;
        VehicleState {
            mean,
            covariance: Matrix6::from_diagonal(&diag),
        }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.mean[IX], self.mean[IY], self.mean[ITH])
    }

    pub fn speed(&self) -> f64 {
        self.mean[IV]
    }

    pub fn yaw_rate(&self) -> f64 {
        self.mean[IW]
    }
}

/// Body-frame speed and yaw rate sampled from the IMU and vehicle feedback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub speed: f64,
    pub yaw_rate: f64,
}

/// Planar pose observation with its reported covariance. The covariance is
/// what the sensor claims, not necessarily what the data deserves; the gate
/// exists exactly because those two can disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub source: SourceId,
    pub timestamp: Timestamp,
    pub pose: Vector3<f64>,
    pub sigma: Matrix3<f64>,
}

/// Per-second process noise, scaled by dt at each prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessNoise {
    pub diag: Vector6<f64>,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        ProcessNoise {
            diag: Vector6::new(1e-4, 1e-4, 1e-5, 1e-8, 0.5, 0.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateThresholds {
    /// Below this every source counts as qualified.
    pub epsilon: f64,
    /// Above this a source is infeasible.
    pub delta: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds {
            epsilon: 0.2,
            delta: 5.0,
        }
    }
}

impl GateThresholds {
    pub fn validate(&self) -> Result<(), EkfError> {
        if self.epsilon > 0.0 && self.epsilon < self.delta && self.delta.is_finite() {
            Ok(())
        } else {
            Err(EkfError::InvalidThresholds {
                epsilon: self.epsilon,
                delta: self.delta,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateDecision {
    /// Every source qualified; use the one with the lowest distance.
    UseQualified(SourceId),
    /// Blend of feasible sources with normalized weights.
    WeightedSum(Vec<(SourceId, f64)>),
    /// Exactly one source is feasible.
    SingleFeasible(SourceId),
    /// Nothing feasible; propagate on the motion model alone.
    Reject,
}

impl GateDecision {
    pub fn label(&self) -> String {
        match self {
            GateDecision::UseQualified(s) => format!("qualified({s})"),
            GateDecision::WeightedSum(_) => "weighted".to_string(),
            GateDecision::SingleFeasible(s) => format!("single({s})"),
            GateDecision::Reject => "reject".to_string(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EkfError {
    #[error("gate thresholds invalid: epsilon {epsilon}, delta {delta}")]
    InvalidThresholds { epsilon: f64, delta: f64 },
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("decision references source {0} but no such measurement was supplied")]
    MissingSource(SourceId),
    #[error("weighted decision carries no usable weights")]
    EmptyWeights,
}

/// Propagates mean and covariance by `dt` seconds. The control input
/// refreshes the random-walk speed and yaw-rate states before the kinematic
/// step; the covariance follows A P A^T + Q dt with A the motion Jacobian.
pub fn predict(state: &VehicleState, u: ControlInput, dt: f64, q: &ProcessNoise) -> VehicleState {
    assert!(dt > 0.0, "prediction step must be positive, got {dt}");
    let mut mean = state.mean;
    mean[IV] = u.speed;
    mean[IW] = u.yaw_rate;

    let (v, w) = (mean[IV], mean[IW]);
    let hb = mean[ITH] + mean[IB];
    let (sin_hb, cos_hb) = hb.sin_cos();

    mean[IX] += v * cos_hb * dt;
    mean[IY] += v * sin_hb * dt;
    mean[ITH] = wrap_angle(mean[ITH] + w * dt);

    let a = motion_jacobian(v, hb, dt);
    let mut cov = a * state.covariance * a.transpose();
    for i in 0..6 {
        cov[(i, i)] += q.diag[i] * dt;
    }
    // guard the symmetry invariant against accumulation error
    cov = (cov + cov.transpose()) * 0.5;

    VehicleState {
        mean,
        covariance: cov,
    }
}

/// Jacobian of the motion model at heading-plus-bias `hb`.
pub fn motion_jacobian(v: f64, hb: f64, dt: f64) -> Matrix6<f64> {
    let (sin_hb, cos_hb) = hb.sin_cos();
    let mut a = Matrix6::identity();
    a[(IX, ITH)] = -v * sin_hb * dt;
    a[(IX, IB)] = -v * sin_hb * dt;
    a[(IX, IV)] = cos_hb * dt;
    a[(IY, ITH)] = v * cos_hb * dt;
    a[(IY, IB)] = v * cos_hb * dt;
    a[(IY, IV)] = sin_hb * dt;
    a[(ITH, IW)] = dt;
    a
}

/// Squared Mahalanobis distance of a pose measurement from the predicted
/// state, over (x, y, theta) with the heading residual wrapped. The metric
/// uses the innovation covariance (predicted pose covariance plus the
/// measurement's), so a filter that has been coasting widens its own gate.
pub fn mahalanobis(state: &VehicleState, m: &Measurement) -> Result<f64, EkfError> {
    let p3 = state.covariance.fixed_view::<3, 3>(0, 0).into_owned();
    let s = p3 + m.sigma;
    let chol = s.cholesky().ok_or(EkfError::SingularInnovation)?;
    let r = Vector3::new(
        state.mean[IX] - m.pose[0],
        state.mean[IY] - m.pose[1],
        wrap_angle(state.mean[ITH] - m.pose[2]),
    );
    Ok(r.dot(&chol.solve(&r)))
}

/// Confidence that a measurement with squared distance `delta` belongs to
/// the current state: 1 - 1/(1 + exp(-delta)), in (0, 0.5] for delta >= 0.
pub fn gate_confidence(delta: f64) -> f64 {
    1.0 - 1.0 / (1.0 + (-delta).exp())
}

/// Four-way gate over per-source squared distances.
pub fn decide_gate(
    deltas: &[(SourceId, f64)],
    thresholds: &GateThresholds,
) -> Result<GateDecision, EkfError> {
    thresholds.validate()?;
    if deltas.is_empty() {
        return Ok(GateDecision::Reject);
    }

    let all_qualified = deltas.iter().all(|&(_, d)| d <= thresholds.epsilon);
    if all_qualified {
        let best = deltas
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
            .unwrap();
        return Ok(GateDecision::UseQualified(best.0));
    }

    let feasible: Vec<(SourceId, f64)> = deltas
        .iter()
        .copied()
        .filter(|&(_, d)| d <= thresholds.delta)
        .collect();

    match feasible.len() {
        0 => Ok(GateDecision::Reject),
        1 => Ok(GateDecision::SingleFeasible(feasible[0].0)),
        k => {
            // lambda_i = 1 - d_i / sum(d), normalized over the k sources so
            // the weights sum to one (for k = 2 the division by k - 1 is a
            // no-op and this is the published two-source form)
            let sum: f64 = feasible.iter().map(|&(_, d)| d).sum();
            let weights: Vec<(SourceId, f64)> = if sum <= f64::MIN_POSITIVE {
                feasible
                    .iter()
                    .map(|&(s, _)| (s, 1.0 / k as f64))
                    .collect()
            } else {
                feasible
                    .iter()
                    .map(|&(s, d)| (s, (1.0 - d / sum) / (k - 1) as f64))
                    .collect()
            };
            Ok(GateDecision::WeightedSum(weights))
        }
    }
}

/// Applies a gate decision. `measurements` must contain every source the
/// decision references. Reject leaves the state untouched.
pub fn correct(
    state: &VehicleState,
    decision: &GateDecision,
    measurements: &[Measurement],
) -> Result<VehicleState, EkfError> {
    let find = |id: SourceId| {
        measurements
            .iter()
            .find(|m| m.source == id)
            .ok_or(EkfError::MissingSource(id))
    };

    match decision {
        GateDecision::Reject => Ok(state.clone()),
        GateDecision::UseQualified(id) | GateDecision::SingleFeasible(id) => {
            let m = find(*id)?;
            update(state, &m.pose, &m.sigma)
        }
        GateDecision::WeightedSum(weights) => {
            if weights.is_empty() {
                return Err(EkfError::EmptyWeights);
            }
            // weighted mean with the heading averaged around the first
            // source's value, and a lambda^2-weighted covariance: the
            // second moment of a weighted sum of independent estimates
            let first = find(weights[0].0)?;
            let theta_ref = first.pose[2];
            let mut z = Vector3::zeros();
            let mut sigma = Matrix3::zeros();
            for &(id, lambda) in weights {
                let m = find(id)?;
                z[0] += lambda * m.pose[0];
                z[1] += lambda * m.pose[1];
                z[2] += lambda * wrap_angle(m.pose[2] - theta_ref);
                sigma += lambda * lambda * m.sigma;
            }
            z[2] = wrap_angle(z[2] + theta_ref);
            update(state, &z, &sigma)
        }
    }
}

/// Standard EKF pose update in Joseph form; H selects (x, y, theta).
fn update(
    state: &VehicleState,
    z: &Vector3<f64>,
    sigma: &Matrix3<f64>,
) -> Result<VehicleState, EkfError> {
    let p = &state.covariance;
    let p3 = p.fixed_view::<3, 3>(0, 0).into_owned();
    let s = p3 + sigma;
    let s_inv = s.try_inverse().ok_or(EkfError::SingularInnovation)?;

    let ph_t: Matrix6x3<f64> = p.fixed_view::<6, 3>(0, 0).into_owned();
    let k = ph_t * s_inv;

    let r = Vector3::new(
        z[0] - state.mean[IX],
        z[1] - state.mean[IY],
        wrap_angle(z[2] - state.mean[ITH]),
    );

    let mut mean = state.mean + k * r;
    mean[ITH] = wrap_angle(mean[ITH]);

    // Joseph form keeps the covariance symmetric positive definite even
    // with a strongly weighted gain
    let mut i_kh = Matrix6::identity();
    for row in 0..6 {
        for col in 0..3 {
            i_kh[(row, col)] -= k[(row, col)];
        }
    }
    let mut cov = i_kh * p * i_kh.transpose() + k * sigma * k.transpose();
    cov = (cov + cov.transpose()) * 0.5;

    Ok(VehicleState {
        mean,
        covariance: cov,
    })
}

/// Reorder buffer in front of the filter. Sources may deliver slightly out
/// of order; the queue releases measurements in timestamp order and drops
/// anything that arrives behind the processing frontier.
#[derive(Debug)]
pub struct MeasurementQueue {
    window: f64,
    pending: Vec<Measurement>,
    frontier: f64,
    dropped_late: u64,
}

impl MeasurementQueue {
    /// `window` is the hold-back applied when releasing: measurements newer
    /// than `now - window` stay queued so a straggler can still slot in.
    /// A zero window trusts the source to be in order.
    pub fn new(window: f64) -> Self {
        assert!(window >= 0.0);
        MeasurementQueue {
            window,
            pending: Vec::new(),
            frontier: f64::NEG_INFINITY,
            dropped_late: 0,
        }
    }

    pub fn push(&mut self, m: Measurement) {
        if m.timestamp.0 < self.frontier {
            self.dropped_late += 1;
            log::warn!(
                "dropping stale measurement from {} at {} (frontier {:.3})",
                m.source,
                m.timestamp,
                self.frontier
            );
            return;
        }
        self.pending.push(m);
    }

    /// Releases everything with timestamp <= `now - window`, oldest first;
    /// ties release lower source ids first.
    pub fn drain_ready(&mut self, now: f64) -> Vec<Measurement> {
        self.take_until(now - self.window)
    }

    /// Releases everything still queued, in timestamp order.
    pub fn flush(&mut self) -> Vec<Measurement> {
        self.take_until(f64::INFINITY)
    }

    fn take_until(&mut self, t: f64) -> Vec<Measurement> {
        let mut out: Vec<Measurement> = Vec::new();
        let mut rest: Vec<Measurement> = Vec::new();
        for m in self.pending.drain(..) {
            if m.timestamp.0 <= t {
                out.push(m);
            } else {
                rest.push(m);
            }
        }
        self.pending = rest;
        out.sort_by(|a, b| {
            a.timestamp
                .0
                .partial_cmp(&b.timestamp.0)
                .unwrap()
                .then(a.source.cmp(&b.source))
        });
        if let Some(last) = out.last() {
            self.frontier = self.frontier.max(last.timestamp.0);
        }
        out
    }

    pub fn dropped_late(&self) -> u64 {
        self.dropped_late
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn tiny_cov_state(x: f64, y: f64, theta: f64) -> VehicleState {
        VehicleState::from_pose(Pose2::new(x, y, theta), Vector6::repeat(1e-15))
    }

    fn meas(source: u8, x: f64, y: f64, theta: f64, sigma: Matrix3<f64>) -> Measurement {
        Measurement {
            source: SourceId(source),
            timestamp: Timestamp(0.0),
            pose: Vector3::new(x, y, theta),
            sigma,
        }
    }

    #[test]
    fn straight_line_prediction_advances_exactly() {
        let state = VehicleState::new(
            Vector6::new(0.0, 0.0, 0.0, 0.0, 10.0, 0.0),
            Matrix6::identity() * 1e-6,
        );
        let u = ControlInput { speed: 10.0, yaw_rate: 0.0 };
        let next = predict(&state, u, 0.1, &ProcessNoise::default());
        assert_relative_eq!(next.mean[IX], 1.0, epsilon = 1e-15);
        assert_relative_eq!(next.mean[IY], 0.0);
        assert_relative_eq!(next.mean[ITH], 0.0);
    }

    #[test]
    fn stationary_prediction_keeps_mean_and_adds_process_noise() {
        let state = VehicleState::new(
            Vector6::new(2.0, -1.0, 0.7, 0.01, 0.0, 0.0),
            Matrix6::zeros(),
        );
        let u = ControlInput { speed: 0.0, yaw_rate: 0.0 };
        let q = ProcessNoise::default();
        let dt = 0.05;
        let next = predict(&state, u, dt, &q);
        assert_eq!(next.mean, state.mean);
        // with zero prior covariance the propagated term vanishes, leaving Q dt
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { q.diag[i] * dt } else { 0.0 };
                assert_relative_eq!(next.covariance[(i, j)], expect, epsilon = 1e-18);
            }
        }
    }

    #[test]
    fn heading_bias_steers_the_position_update() {
        // theta = 0 but bias pi/2: motion must go along +y
        let state = VehicleState::new(
            Vector6::new(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2, 5.0, 0.0),
            Matrix6::identity() * 1e-9,
        );
        let u = ControlInput { speed: 5.0, yaw_rate: 0.0 };
        let next = predict(&state, u, 0.2, &ProcessNoise::default());
        assert_relative_eq!(next.mean[IX], 0.0, epsilon = 1e-12);
        assert_relative_eq!(next.mean[IY], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn known_mahalanobis_value() {
        let state = tiny_cov_state(3.0, 4.0, 0.0);
        let m = meas(0, 0.0, 0.0, 0.0, Matrix3::identity());
        let d = mahalanobis(&state, &m).unwrap();
        assert_relative_eq!(d, 25.0, epsilon = 1e-12);
    }

    #[test]
    fn mahalanobis_wraps_heading_residual() {
        // headings pi - 0.05 and -pi + 0.05 are 0.1 rad apart, not ~2 pi
        let state = tiny_cov_state(0.0, 0.0, std::f64::consts::PI - 0.05);
        let m = meas(0, 0.0, 0.0, -std::f64::consts::PI + 0.05, Matrix3::identity());
        let d = mahalanobis(&state, &m).unwrap();
        assert_relative_eq!(d, 0.01, epsilon = 1e-10);
    }

    #[test]
    fn singular_sigma_is_an_error() {
        let state = VehicleState::from_pose(Pose2::identity(), Vector6::zeros());
        let m = meas(0, 0.0, 0.0, 0.0, Matrix3::zeros());
        assert_eq!(mahalanobis(&state, &m), Err(EkfError::SingularInnovation));
    }

    #[test]
    fn confidence_is_half_at_zero_and_decays() {
        assert_relative_eq!(gate_confidence(0.0), 0.5);
        assert!(gate_confidence(50.0) < 1e-20);
        assert!(gate_confidence(1.0) < gate_confidence(0.5));
    }

    #[test]
    fn gate_all_qualified_picks_lowest_distance() {
        let d = decide_gate(
            &[(SourceId(0), 0.15), (SourceId(1), 0.1)],
            &GateThresholds::default(),
        )
        .unwrap();
        assert_eq!(d, GateDecision::UseQualified(SourceId(1)));
    }

    #[test]
    fn gate_all_feasible_blends_with_published_weights() {
        let d = decide_gate(
            &[(SourceId(0), 1.0), (SourceId(1), 3.0)],
            &GateThresholds::default(),
        )
        .unwrap();
        match d {
            GateDecision::WeightedSum(w) => {
                assert_eq!(w[0].0, SourceId(0));
                assert_relative_eq!(w[0].1, 0.75, epsilon = 1e-12);
                assert_relative_eq!(w[1].1, 0.25, epsilon = 1e-12);
            }
            other => panic!("expected weighted sum, got {other:?}"),
        }
    }

    #[test]
    fn gate_single_feasible_when_partner_is_wild() {
        let d = decide_gate(
            &[(SourceId(0), 0.1), (SourceId(1), 60.0)],
            &GateThresholds::default(),
        )
        .unwrap();
        assert_eq!(d, GateDecision::SingleFeasible(SourceId(0)));
    }

    #[test]
    fn gate_rejects_when_nothing_is_feasible() {
        let d = decide_gate(
            &[(SourceId(0), 7.0), (SourceId(1), 9.0)],
            &GateThresholds::default(),
        )
        .unwrap();
        assert_eq!(d, GateDecision::Reject);
    }

    #[test]
    fn gate_blends_feasible_subset_when_one_source_is_wild() {
        // three sources, one beyond delta: the two feasible ones are blended
        let d = decide_gate(
            &[(SourceId(0), 1.0), (SourceId(1), 2.0), (SourceId(2), 50.0)],
            &GateThresholds::default(),
        )
        .unwrap();
        match d {
            GateDecision::WeightedSum(w) => {
                assert_eq!(w.len(), 2);
                let total: f64 = w.iter().map(|&(_, l)| l).sum();
                assert_relative_eq!(total, 1.0, epsilon = 1e-12);
                assert!(w[0].1 > w[1].1, "closer source gets more weight");
            }
            other => panic!("expected weighted sum, got {other:?}"),
        }
    }

    #[test]
    fn gate_weights_sum_to_one_for_three_sources() {
        let d = decide_gate(
            &[(SourceId(0), 1.0), (SourceId(1), 2.0), (SourceId(2), 3.0)],
            &GateThresholds::default(),
        )
        .unwrap();
        match d {
            GateDecision::WeightedSum(w) => {
                let total: f64 = w.iter().map(|&(_, l)| l).sum();
                assert_relative_eq!(total, 1.0, epsilon = 1e-12);
                // lambda_i = (1 - d_i/6) / 2
                assert_relative_eq!(w[0].1, (1.0 - 1.0 / 6.0) / 2.0, epsilon = 1e-12);
            }
            other => panic!("expected weighted sum, got {other:?}"),
        }
    }

    #[test]
    fn invalid_thresholds_are_rejected() {
        let r = decide_gate(
            &[(SourceId(0), 1.0)],
            &GateThresholds { epsilon: 5.0, delta: 0.2 },
        );
        assert!(matches!(r, Err(EkfError::InvalidThresholds { .. })));
    }

    #[test]
    fn weighted_update_of_identical_measurements_matches_manual_single_update() {
        let state = VehicleState::new(
            Vector6::new(1.0, 2.0, 0.3, 0.0, 8.0, 0.1),
            Matrix6::identity() * 0.5,
        );
        let sigma = Matrix3::from_diagonal(&Vector3::new(0.04, 0.04, 0.01));
        let m0 = meas(0, 1.4, 2.2, 0.35, sigma);
        let m1 = meas(1, 1.4, 2.2, 0.35, sigma);
        let decision = GateDecision::WeightedSum(vec![(SourceId(0), 0.5), (SourceId(1), 0.5)]);
        let fused = correct(&state, &decision, &[m0.clone(), m1]).unwrap();

        // manual Kalman update with the fused covariance 0.25*S + 0.25*S
        let fused_sigma = sigma * 0.5;
        let p3 = state.covariance.fixed_view::<3, 3>(0, 0).into_owned();
        let s = p3 + fused_sigma;
        let k = state.covariance.fixed_view::<6, 3>(0, 0).into_owned() * s.try_inverse().unwrap();
        let r = Vector3::new(
            m0.pose[0] - state.mean[IX],
            m0.pose[1] - state.mean[IY],
            wrap_angle(m0.pose[2] - state.mean[ITH]),
        );
        let expect = state.mean + k * r;
        for i in 0..6 {
            assert_relative_eq!(fused.mean[i], expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn weighted_heading_fusion_survives_the_wrap_seam() {
        let state = tiny_cov_state(0.0, 0.0, std::f64::consts::PI);
        let sigma = Matrix3::identity() * 0.01;
        let m0 = meas(0, 0.0, 0.0, std::f64::consts::PI - 0.1, sigma);
        let m1 = meas(1, 0.0, 0.0, -std::f64::consts::PI + 0.1, sigma);
        let decision = GateDecision::WeightedSum(vec![(SourceId(0), 0.5), (SourceId(1), 0.5)]);
        let fused = correct(&state, &decision, &[m0, m1]).unwrap();
        // the two headings straddle the seam symmetrically; their circular
        // mean is pi, so the state heading must stay put
        assert_relative_eq!(wrap_angle(fused.mean[ITH] - std::f64::consts::PI), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn reject_is_a_no_op() {
        let state = VehicleState::new(
            Vector6::new(1.0, 2.0, 0.3, 0.0, 8.0, 0.1),
            Matrix6::identity(),
        );
        let out = correct(&state, &GateDecision::Reject, &[]).unwrap();
        assert_eq!(out, state);
    }

    #[test]
    fn missing_source_is_an_error() {
        let state = tiny_cov_state(0.0, 0.0, 0.0);
        let r = correct(&state, &GateDecision::UseQualified(SourceId(1)), &[]);
        assert_eq!(r, Err(EkfError::MissingSource(SourceId(1))));
    }

    #[test]
    fn covariance_stays_spd_through_many_random_steps() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut state = VehicleState::from_pose(
            Pose2::identity(),
            Vector6::new(1.0, 1.0, 0.1, 0.01, 1.0, 0.1),
        );
        let q = ProcessNoise::default();
        let thresholds = GateThresholds::default();
        for step in 0..10_000 {
            let u = ControlInput {
                speed: 30.0 * rng.random::<f64>(),
                yaw_rate: 0.6 * (rng.random::<f64>() - 0.5),
            };
            state = predict(&state, u, 0.01, &q);
            if step % 5 == 0 {
                let jitter = 0.3 * (rng.random::<f64>() - 0.5);
                let m0 = meas(
                    0,
                    state.mean[IX] + jitter,
                    state.mean[IY] - jitter,
                    state.mean[ITH] + 0.05 * jitter,
                    Matrix3::from_diagonal(&Vector3::new(0.01, 0.01, 0.001)),
                );
                let m1 = meas(
                    1,
                    state.mean[IX] - 2.0 * jitter,
                    state.mean[IY] + jitter,
                    state.mean[ITH],
                    Matrix3::from_diagonal(&Vector3::new(0.02, 0.02, 0.002)),
                );
                let deltas = vec![
                    (SourceId(0), mahalanobis(&state, &m0).unwrap()),
                    (SourceId(1), mahalanobis(&state, &m1).unwrap()),
                ];
                let decision = decide_gate(&deltas, &thresholds).unwrap();
                state = correct(&state, &decision, &[m0, m1]).unwrap();
            }
            // SPD check: Cholesky must exist and the diagonal must be positive
            assert!(
                state.covariance.cholesky().is_some(),
                "covariance lost positive definiteness at step {step}"
            );
        }
    }

    #[test]
    fn queue_reorders_within_window_and_drops_stale() {
        let mut q = MeasurementQueue::new(0.1);
        let sigma = Matrix3::identity();
        let mk = |t: f64, src: u8| Measurement {
            source: SourceId(src),
            timestamp: Timestamp(t),
            pose: Vector3::zeros(),
            sigma,
        };
        q.push(mk(0.05, 0));
        q.push(mk(0.02, 1)); // out of order, still pending
        q.push(mk(0.08, 0));

        let ready = q.drain_ready(0.16);
        let times: Vec<f64> = ready.iter().map(|m| m.timestamp.0).collect();
        assert_eq!(times, vec![0.02, 0.05]);
        assert_eq!(q.pending_len(), 1);

        // frontier is now 0.05; older arrivals are dropped with a count
        q.push(mk(0.01, 1));
        assert_eq!(q.dropped_late(), 1);

        let rest = q.flush();
        assert_eq!(rest.len(), 1);
        assert_relative_eq!(rest[0].timestamp.0, 0.08);
    }

    proptest! {
        #[test]
        fn gate_branch_is_invariant_under_uniform_scaling(
            d0 in 0.001f64..0.19, d1 in 0.001f64..0.19, scale in 0.2f64..1.0,
        ) {
            // scale keeps both inside the qualified band
            let t = GateThresholds::default();
            let a = decide_gate(&[(SourceId(0), d0), (SourceId(1), d1)], &t).unwrap();
            let b = decide_gate(&[(SourceId(0), d0 * scale), (SourceId(1), d1 * scale)], &t).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn gate_weights_are_scale_invariant_in_the_feasible_band(
            d0 in 0.5f64..4.9, d1 in 0.5f64..4.9, scale in 0.5f64..1.0,
        ) {
            prop_assume!(d0.max(d1) > 0.2 / scale);
            let t = GateThresholds::default();
            let a = decide_gate(&[(SourceId(0), d0), (SourceId(1), d1)], &t).unwrap();
            let b = decide_gate(
                &[(SourceId(0), d0 * scale), (SourceId(1), d1 * scale)], &t,
            ).unwrap();
            match (a, b) {
                (GateDecision::WeightedSum(wa), GateDecision::WeightedSum(wb)) => {
                    for (x, y) in wa.iter().zip(wb.iter()) {
                        prop_assert!((x.1 - y.1).abs() < 1e-12);
                    }
                }
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn confidence_stays_in_half_open_range(d in 0.0f64..1e6) {
            let p = gate_confidence(d);
            prop_assert!(p >= 0.0);
            prop_assert!(p <= 0.5);
            // beyond ~36 the term 1/(1+exp(-d)) rounds to exactly 1
            prop_assert!(d > 36.0 || p > 0.0);
        }
    }
}
