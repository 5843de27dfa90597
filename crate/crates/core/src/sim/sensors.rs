//! Deterministic sensor synthesis on top of the track geometry.
//!
//! Every sensor draws from its own counter-based RNG stream derived from the
//! run seed, so adding or removing one sensor never perturbs another. GPS
//! base noise is truncated at three sigma; scheduled degradation noise is
//! deliberately unbounded and never reflected in the reported covariance,
//! which is exactly the failure mode the measurement gate has to absorb.

use crate::sim::track::TrackDefinition;
use crate::types::{wrap_angle, Point3, Pose2};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Gyro yaw rate sample, 100 Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub gyro_z: f64,
}

/// Wheel speed and steering angle feedback, 100 Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSample {
    pub t: f64,
    pub speed: f64,
    pub steer: f64,
}

/// One GPS/INS pose fix. `sigma` is the covariance the unit reports, which
/// tracks the configured base noise and never the injected degradation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub t: f64,
    pub unit: u8,
    pub pose: Vector3<f64>,
    pub sigma: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointLabel {
    Ground,
    /// Vertical structure: boundary walls and the marker posts along them.
    Wall,
}

/// Geometry mix drawn by the surface sampler. An unswept apron separates
/// the paved edge from the boundary wall, the way a real circuit keeps its
/// barrier off the racing surface, and marker boards stand on that apron at
/// a regular arc spacing; without the boards, long constant-curvature
/// sections would be featureless corridors that scan matching cannot pin
/// down longitudinally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSampling {
    pub wall_fraction: f64,
    pub wall_height: f64,
    /// Lateral distance from the paved edge to the wall face.
    pub wall_setback: f64,
    pub board_fraction: f64,
    pub board_spacing: f64,
    /// Lateral extent of each board panel.
    pub board_width: f64,
    pub board_height: f64,
    /// Lateral distance from the paved edge to the board center.
    pub board_setback: f64,
}

impl Default for SurfaceSampling {
    fn default() -> Self {
        SurfaceSampling {
            wall_fraction: 0.50,
            wall_height: 1.5,
            wall_setback: 2.7,
            board_fraction: 0.10,
            board_spacing: 9.0,
            board_width: 0.9,
            board_height: 1.2,
            board_setback: 1.2,
        }
    }
}

/// Body-frame LiDAR scan with per-point ground/wall labels carried along so
/// tests can score segmentation exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    pub t: f64,
    pub points: Vec<Point3>,
    pub labels: Vec<PointLabel>,
}

/// Ground-truth vehicle state at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthState {
    pub t: f64,
    pub pose: Pose2,
    pub speed: f64,
    pub yaw_rate: f64,
    /// Arc length of the centerline projection.
    pub s: f64,
    /// Signed lateral offset from the centerline, positive left.
    pub lateral: f64,
}

/// Everything the sensors produced at one 100 Hz tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFrame {
    pub tick: u64,
    pub truth: TruthState,
    pub imu: ImuSample,
    pub vehicle: VehicleSample,
    pub gps: Vec<GpsFix>,
    pub scan: Option<LidarScan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SensorTarget {
    Gps(u8),
    Lidar,
    Gyro,
}

/// Degradation applied to one sensor over [t_start, t_end): extra zero-mean
/// noise, a constant position offset, or a total dropout. Bias applies to
/// GPS fixes only (it is a position quantity); dropout silences GPS units
/// and the LiDAR but never the 100 Hz inertial channel, which on the real
/// platform is wired, not radio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseWindow {
    pub target: SensorTarget,
    pub t_start: f64,
    pub t_end: f64,
    pub sigma: f64,
    pub bias: Vector2<f64>,
    pub dropout: bool,
}

impl NoiseWindow {
    pub fn noise(target: SensorTarget, t_start: f64, t_end: f64, sigma: f64) -> Self {
        NoiseWindow {
            target,
            t_start,
            t_end,
            sigma,
            bias: Vector2::zeros(),
            dropout: false,
        }
    }

    pub fn offset(target: SensorTarget, t_start: f64, t_end: f64, bias: Vector2<f64>) -> Self {
        NoiseWindow {
            target,
            t_start,
            t_end,
            sigma: 0.0,
            bias,
            dropout: false,
        }
    }

    pub fn dropout(target: SensorTarget, t_start: f64, t_end: f64) -> Self {
        NoiseWindow {
            target,
            t_start,
            t_end,
            sigma: 0.0,
            bias: Vector2::zeros(),
            dropout: true,
        }
    }

    fn active(&self, target: SensorTarget, t: f64) -> bool {
        self.target == target && t >= self.t_start && t < self.t_end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub windows: Vec<NoiseWindow>,
}

impl NoiseSchedule {
    /// Root-sum-square of all windows active on `target` at time `t`.
    pub fn extra_sigma(&self, target: SensorTarget, t: f64) -> f64 {
        let sum: f64 = self
            .windows
            .iter()
            .filter(|w| w.active(target, t))
            .map(|w| w.sigma * w.sigma)
            .sum();
        sum.sqrt()
    }

    /// Sum of the biases active on `target` at time `t`.
    pub fn bias(&self, target: SensorTarget, t: f64) -> Vector2<f64> {
        self.windows
            .iter()
            .filter(|w| w.active(target, t))
            .map(|w| w.bias)
            .sum()
    }

    pub fn dropped(&self, target: SensorTarget, t: f64) -> bool {
        self.windows.iter().any(|w| w.active(target, t) && w.dropout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorParams {
    pub wheelbase: f64,
    /// GPS fires every this many base ticks (5 ticks at dt 0.01 is 20 Hz).
    pub gps_divisor: u64,
    pub gps_units: u8,
    pub gps_sigma_xy: f64,
    pub gps_sigma_heading: f64,
    /// Covariance the unit claims; None means it reports the true base noise.
    pub gps_reported_sigma_xy: Option<f64>,
    pub gps_reported_sigma_heading: Option<f64>,
    pub gyro_sigma: f64,
    pub gyro_bias: f64,
    pub speed_sigma: f64,
    pub steer_sigma: f64,
    /// LiDAR fires every this many base ticks (10 ticks at dt 0.01 is 10 Hz).
    pub lidar_divisor: u64,
    pub lidar_points: usize,
    pub lidar_sigma: f64,
    /// Sampling window along the track, meters behind and ahead.
    pub lidar_behind: f64,
    pub lidar_ahead: f64,
    pub sampling: SurfaceSampling,
}

impl Default for SensorParams {
    fn default() -> Self {
        SensorParams {
            wheelbase: 3.0,
            gps_divisor: 5,
            gps_units: 2,
            gps_sigma_xy: 0.15,
            gps_sigma_heading: 0.02,
            gps_reported_sigma_xy: None,
            gps_reported_sigma_heading: None,
            gyro_sigma: 0.003,
            gyro_bias: 0.01,
            speed_sigma: 0.05,
            steer_sigma: 0.002,
            lidar_divisor: 10,
            lidar_points: 4000,
            lidar_sigma: 0.02,
            lidar_behind: 15.0,
            lidar_ahead: 45.0,
            sampling: SurfaceSampling::default(),
        }
    }
}

/// Full simulation parameter set shared by the scripted and closed-loop
/// drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub seed: u64,
    pub duration: f64,
    pub dt: f64,
    pub start_s: f64,
    pub v_max: f64,
    pub a_lat: f64,
    pub a_lon: f64,
    pub sensors: SensorParams,
    pub schedule: NoiseSchedule,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            seed: 1,
            duration: 60.0,
            dt: 0.01,
            start_s: 0.0,
            v_max: 20.0,
            a_lat: 8.0,
            a_lon: 6.0,
            sensors: SensorParams::default(),
            schedule: NoiseSchedule::default(),
        }
    }
}

/// Zero-mean normal sample rejected and redrawn beyond three sigma, so the
/// base sensor error is bounded by construction.
pub fn truncated_normal(rng: &mut ChaCha12Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let dist = Normal::new(0.0, sigma).expect("sigma validated positive");
    loop {
        let x = dist.sample(rng);
        if x.abs() <= 3.0 * sigma {
            return x;
        }
    }
}

fn plain_normal(rng: &mut ChaCha12Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("sigma validated positive").sample(rng)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-sensor RNG streams. Stream ids 10.. are the GPS units.
struct SensorRngs {
    gps: Vec<ChaCha12Rng>,
    imu: ChaCha12Rng,
    vehicle: ChaCha12Rng,
    lidar: ChaCha12Rng,
    degrade: ChaCha12Rng,
}

impl SensorRngs {
    fn new(seed: u64, gps_units: u8) -> Self {
        SensorRngs {
            gps: (0..gps_units).map(|u| stream_rng(seed, 10 + u as u64)).collect(),
            imu: stream_rng(seed, 3),
            vehicle: stream_rng(seed, 4),
            lidar: stream_rng(seed, 5),
            degrade: stream_rng(seed, 7),
        }
    }
}

/// Draws `n` surface points in the world frame around arc length `s_center`:
/// vertical wall strips at both track edges, marker boards inboard of the
/// walls at fixed arc positions, and banked road surface between them.
/// Returned labels are parallel to the points; boards count as walls.
pub fn sample_surface_points(
    track: &TrackDefinition,
    s_center: f64,
    behind: f64,
    ahead: f64,
    n: usize,
    sampling: &SurfaceSampling,
    rng: &mut ChaCha12Rng,
) -> (Vec<Point3>, Vec<PointLabel>) {
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let n_wall = ((n as f64) * sampling.wall_fraction).round() as usize;
    let n_board = ((n as f64) * sampling.board_fraction).round() as usize;
    let n_board = n_board.min(n.saturating_sub(n_wall));
    let hw = track.half_width;

    // The canonical board set is the multiples of the spacing inside one
    // lap, each shifted by an index-determined jitter so the pattern never
    // repeats under a whole-spacing slide. Window indices wrap onto that
    // set, so a stretch crossing the start line sees the same boards
    // whether sampled for a scan or a map.
    let n_canonical = (track.length / sampling.board_spacing).floor() as i64;
    let k_min = ((s_center - behind) / sampling.board_spacing).ceil() as i64;
    let k_max = ((s_center + ahead - 1e-9) / sampling.board_spacing).floor() as i64;
    let has_boards = n_canonical >= 1 && k_min <= k_max;
    // integer-hash jitter in [-0.35, 0.35) spacings; a hash (rather than a
    // low-discrepancy sequence) keeps consecutive gaps varied, so no single
    // slide distance lines up a large share of the boards
    let board_s = |k: i64| {
        let mut z = (k as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        let unit = (z >> 11) as f64 / (1u64 << 53) as f64;
        let jitter = (unit - 0.5) * 0.7 * sampling.board_spacing;
        (k as f64 * sampling.board_spacing + jitter).rem_euclid(track.length)
    };

    for i in 0..n {
        if i < n_wall {
            let s = s_center + rng.random_range(-behind..ahead);
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let base = track.surface_point(s, side * (hw + sampling.wall_setback));
            let h = rng.random_range(0.0..sampling.wall_height);
            points.push(Point3::new(base.x, base.y, base.z + h));
            labels.push(PointLabel::Wall);
        } else if i < n_wall + n_board && has_boards {
            let k = rng.random_range(k_min..=k_max).rem_euclid(n_canonical);
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let u = rng.random_range(-0.5..0.5) * sampling.board_width;
            let lateral = side * (hw + sampling.board_setback) + u;
            let base = track.surface_point(board_s(k), lateral);
            let h = rng.random_range(0.0..sampling.board_height);
            points.push(Point3::new(base.x, base.y, base.z + h));
            labels.push(PointLabel::Wall);
        } else {
            let s = s_center + rng.random_range(-behind..ahead);
            let lateral = rng.random_range(-hw..hw);
            points.push(track.surface_point(s, lateral));
            labels.push(PointLabel::Ground);
        }
    }
    (points, labels)
}

/// Synthesizes one body-frame scan from the truth pose. `s` and `lateral`
/// locate the vehicle on the track; the body transform is yaw-only with the
/// origin on the local road surface.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_scan(
    track: &TrackDefinition,
    t: f64,
    s: f64,
    lateral: f64,
    pose: &Pose2,
    params: &SensorParams,
    extra_sigma: f64,
    rng: &mut ChaCha12Rng,
) -> LidarScan {
    let (world, labels) = sample_surface_points(
        track,
        s,
        params.lidar_behind,
        params.lidar_ahead,
        params.lidar_points,
        &params.sampling,
        rng,
    );
    let z_vehicle = track.surface_point(s, lateral).z;
    let (sin_h, cos_h) = pose.theta.sin_cos();
    let sigma = (params.lidar_sigma * params.lidar_sigma + extra_sigma * extra_sigma).sqrt();

    let points: Vec<Point3> = world
        .iter()
        .map(|p| {
            let dx = p.x - pose.x;
            let dy = p.y - pose.y;
            Point3::new(
                cos_h * dx + sin_h * dy + plain_normal(rng, sigma),
                -sin_h * dx + cos_h * dy + plain_normal(rng, sigma),
                p.z - z_vehicle + plain_normal(rng, sigma),
            )
        })
        .collect();

    LidarScan { t, points, labels }
}

/// Shared per-tick sensor sampling used by both drivers. Sensors fire in a
/// fixed order (IMU, vehicle, GPS units, LiDAR) from independent streams.
struct SensorBank<'a> {
    track: &'a TrackDefinition,
    params: &'a SimParams,
    rngs: SensorRngs,
}

impl<'a> SensorBank<'a> {
    fn new(track: &'a TrackDefinition, params: &'a SimParams) -> Self {
        SensorBank {
            track,
            params,
            rngs: SensorRngs::new(params.seed, params.sensors.gps_units),
        }
    }

    fn frame(&mut self, tick: u64, truth: TruthState, steer_true: f64) -> SimFrame {
        let sp = &self.params.sensors;
        let t = truth.t;

        let gyro_extra = self.params.schedule.extra_sigma(SensorTarget::Gyro, t);
        let imu = ImuSample {
            t,
            gyro_z: truth.yaw_rate
                + sp.gyro_bias
                + truncated_normal(&mut self.rngs.imu, sp.gyro_sigma)
                + plain_normal(&mut self.rngs.degrade, gyro_extra),
        };

        let vehicle = VehicleSample {
            t,
            speed: truth.speed + truncated_normal(&mut self.rngs.vehicle, sp.speed_sigma),
            steer: steer_true + truncated_normal(&mut self.rngs.vehicle, sp.steer_sigma),
        };

        let mut gps = Vec::new();
        if tick % sp.gps_divisor == 0 {
            let rep_xy = sp.gps_reported_sigma_xy.unwrap_or(sp.gps_sigma_xy).max(1e-6);
            let rep_h = sp
                .gps_reported_sigma_heading
                .unwrap_or(sp.gps_sigma_heading)
                .max(1e-6);
            let sigma = Matrix3::from_diagonal(&Vector3::new(
                rep_xy * rep_xy,
                rep_xy * rep_xy,
                rep_h * rep_h,
            ));
            for unit in 0..sp.gps_units {
                if self.params.schedule.dropped(SensorTarget::Gps(unit), t) {
                    continue;
                }
                let rng = &mut self.rngs.gps[unit as usize];
                let ex = truncated_normal(rng, sp.gps_sigma_xy);
                let ey = truncated_normal(rng, sp.gps_sigma_xy);
                let eh = truncated_normal(rng, sp.gps_sigma_heading);
                let extra = self.params.schedule.extra_sigma(SensorTarget::Gps(unit), t);
                let (dx, dy, dh) = if extra > 0.0 {
                    (
                        plain_normal(&mut self.rngs.degrade, extra),
                        plain_normal(&mut self.rngs.degrade, extra),
                        plain_normal(&mut self.rngs.degrade, extra * 0.05),
                    )
                } else {
                    (0.0, 0.0, 0.0)
                };
                let bias = self.params.schedule.bias(SensorTarget::Gps(unit), t);
                gps.push(GpsFix {
                    t,
                    unit,
                    pose: Vector3::new(
                        truth.pose.x + ex + dx + bias.x,
                        truth.pose.y + ey + dy + bias.y,
                        wrap_angle(truth.pose.theta + eh + dh),
                    ),
                    sigma,
                });
            }
        }

        let scan = if tick % sp.lidar_divisor == 0
            && !self.params.schedule.dropped(SensorTarget::Lidar, t)
        {
            let extra = self.params.schedule.extra_sigma(SensorTarget::Lidar, t);
            Some(synthesize_scan(
                self.track,
                t,
                truth.s,
                truth.lateral,
                &truth.pose,
                sp,
                extra,
                &mut self.rngs.lidar,
            ))
        } else {
            None
        };

        SimFrame {
            tick,
            truth,
            imu,
            vehicle,
            gps,
            scan,
        }
    }
}

/// Scripted run: the truth follows the centerline exactly at the
/// curvature-limited profile speed. Used for open-loop estimation scenarios
/// where the truth must be geometrically exact.
pub fn simulate_scripted(track: &TrackDefinition, params: &SimParams) -> Vec<SimFrame> {
    use crate::sim::track::SpeedProfile;
    assert!(params.dt > 0.0 && params.duration > params.dt);
    let profile = SpeedProfile::build(track, params.v_max, params.a_lat, params.a_lon);
    let mut bank = SensorBank::new(track, params);

    let ticks = (params.duration / params.dt).round() as u64;
    let mut frames = Vec::with_capacity(ticks as usize);
    let mut s = params.start_s;
    for tick in 0..ticks {
        let t = tick as f64 * params.dt;
        let c = track.sample_at(s);
        let v = profile.at(track, s);
        let truth = TruthState {
            t,
            pose: Pose2::new(c.x, c.y, c.heading),
            speed: v,
            yaw_rate: v * c.curvature,
            s: s.rem_euclid(track.length),
            lateral: 0.0,
        };
        let steer_true = (params.sensors.wheelbase * c.curvature).atan();
        frames.push(bank.frame(tick, truth, steer_true));
        s += v * params.dt;
    }
    frames
}

/// Steering and speed request applied to the closed-loop vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveCommand {
    pub speed: f64,
    pub steer: f64,
}

/// Kinematic bicycle with first-order actuator limits, stepped by an
/// external controller. Each `step` returns the sensor frame observed at
/// the pre-step time, then advances the truth by `dt`.
pub struct ClosedLoopSim<'a> {
    pub track: &'a TrackDefinition,
    params: SimParams,
    bank: SensorBank<'a>,
    pose: Pose2,
    speed: f64,
    steer: f64,
    tick: u64,
    proj_hint: Option<usize>,
    pub steer_max: f64,
    pub steer_rate: f64,
}

impl<'a> ClosedLoopSim<'a> {
    pub fn new(track: &'a TrackDefinition, params: &'a SimParams) -> Self {
        let start = track.pose_at(params.start_s);
        ClosedLoopSim {
            track,
            params: params.clone(),
            bank: SensorBank::new(track, params),
            pose: start,
            speed: 0.0,
            steer: 0.0,
            tick: 0,
            proj_hint: None,
            steer_max: 0.45,
            steer_rate: 1.5,
        }
    }

    pub fn ticks(&self) -> u64 {
        (self.params.duration / self.params.dt).round() as u64
    }

    pub fn truth_pose(&self) -> Pose2 {
        self.pose
    }

    pub fn step(&mut self, cmd: DriveCommand) -> SimFrame {
        let dt = self.params.dt;
        let t = self.tick as f64 * dt;

        let proj = self.track.project(self.pose.x, self.pose.y, self.proj_hint);
        self.proj_hint = Some(proj.index);
        let yaw_rate = if self.params.sensors.wheelbase > 0.0 {
            self.speed * self.steer.tan() / self.params.sensors.wheelbase
        } else {
            0.0
        };
        let truth = TruthState {
            t,
            pose: self.pose,
            speed: self.speed,
            yaw_rate,
            s: proj.s,
            lateral: proj.lateral,
        };
        let frame = self.bank.frame(self.tick, truth, self.steer);

        // actuator limits, then the kinematic bicycle step
        let dv = (cmd.speed - self.speed).clamp(-self.params.a_lon * dt, self.params.a_lon * dt);
        self.speed += dv;
        let target = cmd.steer.clamp(-self.steer_max, self.steer_max);
        let dsteer = (target - self.steer).clamp(-self.steer_rate * dt, self.steer_rate * dt);
        self.steer += dsteer;

        let w = if self.params.sensors.wheelbase > 0.0 {
            self.speed * self.steer.tan() / self.params.sensors.wheelbase
        } else {
            0.0
        };
        self.pose = Pose2::new(
            self.pose.x + self.speed * self.pose.theta.cos() * dt,
            self.pose.y + self.speed * self.pose.theta.sin() * dt,
            self.pose.theta + w * dt,
        );
        self.tick += 1;
        frame
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::track::{oval, BankParams, OvalParams};
    use approx::assert_relative_eq;

    fn test_track() -> TrackDefinition {
        oval(OvalParams::default(), BankParams::default(), 0.5)
    }

    fn short_params(seed: u64) -> SimParams {
        SimParams {
            seed,
            duration: 3.0,
            v_max: 15.0,
            ..SimParams::default()
        }
    }

    #[test]
    fn scripted_run_is_deterministic_per_seed() {
        let track = test_track();
        let a = simulate_scripted(&track, &short_params(9));
        let b = simulate_scripted(&track, &short_params(9));
        assert_eq!(a.len(), b.len());
        for (fa, fb) in a.iter().zip(b.iter()) {
            assert_eq!(fa, fb);
        }
        let c = simulate_scripted(&track, &short_params(10));
        assert_ne!(a[5].imu.gyro_z.to_bits(), c[5].imu.gyro_z.to_bits());
    }

    #[test]
    fn sensor_rates_follow_the_divisors() {
        let track = test_track();
        let frames = simulate_scripted(&track, &short_params(2));
        for f in &frames {
            assert_eq!(!f.gps.is_empty(), f.tick % 5 == 0);
            assert_eq!(f.scan.is_some(), f.tick % 10 == 0);
            if !f.gps.is_empty() {
                assert_eq!(f.gps.len(), 2);
            }
        }
        assert_eq!(frames.len(), 300);
    }

    #[test]
    fn base_gps_error_is_bounded_by_three_sigma() {
        let track = test_track();
        let mut params = short_params(3);
        params.duration = 10.0;
        let frames = simulate_scripted(&track, &params);
        let sp = &params.sensors;
        for f in &frames {
            for g in &f.gps {
                assert!((g.pose[0] - f.truth.pose.x).abs() <= 3.0 * sp.gps_sigma_xy + 1e-12);
                assert!((g.pose[1] - f.truth.pose.y).abs() <= 3.0 * sp.gps_sigma_xy + 1e-12);
                let dh = wrap_angle(g.pose[2] - f.truth.pose.theta);
                assert!(dh.abs() <= 3.0 * sp.gps_sigma_heading + 1e-12);
            }
        }
    }

    #[test]
    fn degradation_breaks_the_bound_but_not_the_report() {
        let track = test_track();
        let mut params = short_params(4);
        params.duration = 10.0;
        params
            .schedule
            .windows
            .push(NoiseWindow::noise(SensorTarget::Gps(0), 2.0, 8.0, 5.0));
        let frames = simulate_scripted(&track, &params);
        let sp = params.sensors.clone();
        let mut exceeded = false;
        for f in &frames {
            for g in &f.gps {
                assert_relative_eq!(g.sigma[(0, 0)], sp.gps_sigma_xy * sp.gps_sigma_xy);
                let err = ((g.pose[0] - f.truth.pose.x).powi(2)
                    + (g.pose[1] - f.truth.pose.y).powi(2))
                .sqrt();
                if g.unit == 0 && f.truth.t >= 2.0 && f.truth.t < 8.0 && err > 3.0 * sp.gps_sigma_xy {
                    exceeded = true;
                }
                if g.unit == 1 {
                    assert!(
                        err <= 3.0 * sp.gps_sigma_xy * 2.0_f64.sqrt() + 1e-12,
                        "clean unit stayed clean"
                    );
                }
            }
        }
        assert!(exceeded, "5 m injected noise must show up in unit 0");
    }

    #[test]
    fn dropout_windows_silence_gps_and_lidar() {
        let track = test_track();
        let mut params = short_params(11);
        params.duration = 10.0;
        params
            .schedule
            .windows
            .push(NoiseWindow::dropout(SensorTarget::Gps(0), 2.0, 6.0));
        params
            .schedule
            .windows
            .push(NoiseWindow::dropout(SensorTarget::Gps(1), 2.0, 6.0));
        params
            .schedule
            .windows
            .push(NoiseWindow::dropout(SensorTarget::Lidar, 3.0, 5.0));
        let frames = simulate_scripted(&track, &params);
        let mut saw_gps_outside = false;
        let mut saw_scan_outside = false;
        for f in &frames {
            let t = f.truth.t;
            if (2.0..6.0).contains(&t) {
                assert!(f.gps.is_empty(), "no fixes during a full GPS dropout");
            } else if !f.gps.is_empty() {
                saw_gps_outside = true;
            }
            if (3.0..5.0).contains(&t) {
                assert!(f.scan.is_none(), "no scans during a LiDAR dropout");
            } else if f.scan.is_some() {
                saw_scan_outside = true;
            }
            assert!(f.imu.gyro_z.is_finite(), "inertial channel never drops");
        }
        assert!(saw_gps_outside && saw_scan_outside);
    }

    #[test]
    fn bias_window_shifts_one_unit_only() {
        let track = test_track();
        let mut params = short_params(12);
        params.duration = 6.0;
        let shift = Vector2::new(4.0, -3.0);
        params
            .schedule
            .windows
            .push(NoiseWindow::offset(SensorTarget::Gps(1), 1.0, 4.0, shift));
        let frames = simulate_scripted(&track, &params);
        let slack = 3.0 * params.sensors.gps_sigma_xy * 2.0_f64.sqrt() + 1e-12;
        for f in &frames {
            for g in &f.gps {
                let err = ((g.pose[0] - f.truth.pose.x).powi(2)
                    + (g.pose[1] - f.truth.pose.y).powi(2))
                .sqrt();
                if g.unit == 1 && (1.0..4.0).contains(&f.truth.t) {
                    assert!(
                        (err - shift.norm()).abs() <= slack,
                        "biased unit sits a constant 5 m off truth, got {err}"
                    );
                } else {
                    assert!(err <= slack, "unbiased fixes stay near truth");
                }
            }
        }
    }

    #[test]
    fn zero_noise_sensors_are_exact() {
        let track = test_track();
        let mut params = short_params(5);
        params.sensors.gps_sigma_xy = 0.0;
        params.sensors.gps_sigma_heading = 0.0;
        params.sensors.gps_reported_sigma_xy = Some(1e-3);
        params.sensors.gps_reported_sigma_heading = Some(1e-3);
        params.sensors.gyro_sigma = 0.0;
        params.sensors.gyro_bias = 0.0;
        params.sensors.speed_sigma = 0.0;
        params.sensors.steer_sigma = 0.0;
        let frames = simulate_scripted(&track, &params);
        for f in &frames {
            assert_eq!(f.imu.gyro_z, f.truth.yaw_rate);
            assert_eq!(f.vehicle.speed, f.truth.speed);
            for g in &f.gps {
                assert_eq!(g.pose[0], f.truth.pose.x);
                assert_eq!(g.pose[1], f.truth.pose.y);
                assert_relative_eq!(g.sigma[(0, 0)], 1e-6);
            }
        }
    }

    #[test]
    fn scan_points_sit_near_track_surfaces_in_body_frame() {
        let track = test_track();
        let params = short_params(6);
        let frames = simulate_scripted(&track, &params);
        let f = frames.iter().find(|f| f.scan.is_some()).unwrap();
        let scan = f.scan.as_ref().unwrap();
        assert_eq!(scan.points.len(), params.sensors.lidar_points);
        assert_eq!(scan.labels.len(), scan.points.len());

        let hw = track.half_width;
        let reach = hw + params.sensors.sampling.wall_setback;
        let mut wall_seen = 0usize;
        for (p, label) in scan.points.iter().zip(scan.labels.iter()) {
            // body frame: x forward, y left; everything within the window
            assert!(p.x > -params.sensors.lidar_behind - reach - 1.0);
            assert!(p.x < params.sensors.lidar_ahead + reach + 1.0);
            match label {
                PointLabel::Wall => {
                    wall_seen += 1;
                    let tallest = params
                        .sensors
                        .sampling
                        .wall_height
                        .max(params.sensors.sampling.board_height);
                    assert!(p.z > -1.0 && p.z < tallest + 1.0);
                }
                PointLabel::Ground => {
                    assert!(p.z.abs() < hw * 0.07 + 0.2, "ground z {} too far", p.z);
                }
            }
        }
        assert!(wall_seen > scan.points.len() / 3);
    }

    #[test]
    fn closed_loop_straight_drive_tracks_commands() {
        let track = test_track();
        let mut params = short_params(7);
        params.duration = 2.0;
        let mut sim = ClosedLoopSim::new(&track, &params);
        let mut last = None;
        for _ in 0..sim.ticks() {
            last = Some(sim.step(DriveCommand { speed: 10.0, steer: 0.0 }));
        }
        let f = last.unwrap();
        // a_lon = 6: after 2 s the speed should be near min(10, 12)
        assert!(f.truth.speed > 9.0, "speed {}", f.truth.speed);
        assert!(f.truth.pose.x > 5.0);
        assert_relative_eq!(f.truth.pose.y, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn frames_serialize_round_trip() {
        let track = test_track();
        let mut params = short_params(8);
        params.duration = 0.3;
        let frames = simulate_scripted(&track, &params);
        let f = frames.iter().find(|f| f.scan.is_some()).unwrap();
        let json = serde_json::to_string(f).unwrap();
        let back: SimFrame = serde_json::from_str(&json).unwrap();
        assert_eq!(*f, back);
    }
}
