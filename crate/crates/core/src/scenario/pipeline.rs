//! The end-to-end runs behind the CLI: simulate or replay a frame stream,
//! fuse it, optionally steer the vehicle, and collect every row the output
//! files need. All entry points are pure with respect to the filesystem
//! except the explicit frame readers and writers; callers decide what gets
//! persisted.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use nalgebra::{Matrix3, Vector3, Vector6};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::ekf::{
    correct, decide_gate, mahalanobis, predict, ControlInput, GateDecision, GateThresholds,
    Measurement, MeasurementQueue, ProcessNoise, SourceId, VehicleState, IV, IW,
};
use crate::liv::{integrate, LivParams};
use crate::localizer::{
    load_map, scan_to_cloud, synthesize_track_map, FixSource, LocalizerFix, MapBucket,
    ScanLocalizer, TrackMap,
};
use crate::mapping::{
    detect_loops, unify_frames, OptimizeParams, OptimizeReport, PoseGraph, PoseLoopMatcher,
    RacetrackIndex,
};
use crate::metrics::{trajectory_error_with_interval, MetricsReport, ResourceMonitor};
use crate::registration::{
    estimate_covariances, register, voxel_downsample, KernelDescriptor, RegistrationParams,
};
use crate::scenario::config::{ConfigError, RunMode, ScenarioConfig};
use crate::sim::{
    sample_surface_points, simulate_scripted, ClosedLoopSim, DriveCommand, ImuSample, SimFrame,
    SimParams, SpeedProfile, TrackDefinition, VehicleSample,
};
use crate::types::{Frame, Point3, Pose2, RigidTransform3, Timestamp};
use crate::wall::{
    cluster, engage, extract_wall, filter_ground, make_path, FallbackPath, WallNavError,
    WallNavParams,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}:{line}: {message}")]
    Frames {
        path: String,
        line: usize,
        message: String,
    },
    /// A run started and then broke an invariant; maps to exit code 3.
    #[error("runtime invariant breached: {0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ScenarioError {
    fn io(path: &Path, source: std::io::Error) -> ScenarioError {
        ScenarioError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One fused estimate, one row of `estimate.csv`.
#[derive(Debug, Clone)]
pub struct EstimateRow {
    pub t: f64,
    pub pose: Pose2,
    /// Gate outcome for this tick, `predict` when nothing was measured.
    pub decision: String,
}

/// One row of `diagnostics.csv`. `kind` is `gate`, `scan`, or `wall`;
/// fields that do not apply to a kind stay None and serialize empty.
#[derive(Debug, Clone)]
pub struct DiagRow {
    pub t: f64,
    pub kind: &'static str,
    pub source_id: Option<u8>,
    pub delta: Option<f64>,
    pub decision: String,
    pub lambda: Option<f64>,
    pub engaged: Option<bool>,
    pub d_wall: Option<f64>,
    pub d_gap: Option<f64>,
    pub reason: String,
}

impl DiagRow {
    fn empty(t: f64, kind: &'static str) -> DiagRow {
        DiagRow {
            t,
            kind,
            source_id: None,
            delta: None,
            decision: String::new(),
            lambda: None,
            engaged: None,
            d_wall: None,
            d_gap: None,
            reason: String::new(),
        }
    }
}

/// One scan-localizer attempt, kept in full for analysis.
#[derive(Debug, Clone)]
pub struct ScanRecord {
    pub t: f64,
    pub source: FixSource,
    pub reliability: f64,
    pub pose: Pose2,
    /// Truth pose at the scan tick, for error scoring.
    pub truth: Pose2,
    pub iterations: usize,
}

/// Wall-follower state at one scan tick of a closed-loop run.
#[derive(Debug, Clone)]
pub struct WallRecord {
    pub t: f64,
    pub engaged: bool,
    pub d_wall: Option<f64>,
    /// Estimated wheel-to-wall clearance from the fitted wall.
    pub wheel_wall: Option<f64>,
    pub reason: &'static str,
}

/// Everything one scenario run produces, before any file is written.
#[derive(Debug)]
pub struct RunArtifacts {
    pub truth: Vec<(Timestamp, Pose2)>,
    pub estimate: Vec<EstimateRow>,
    pub diagnostics: Vec<DiagRow>,
    pub scans: Vec<ScanRecord>,
    pub walls: Vec<WallRecord>,
    pub report: MetricsReport,
    /// Raw frame stream, kept only when the config asks to persist it.
    pub frames: Option<Vec<SimFrame>>,
}

fn fix_source_label(source: FixSource) -> &'static str {
    match source {
        FixSource::ScanMatch => "scan_match",
        FixSource::GpsReseeded => "gps_reseeded",
        FixSource::DeadReckoned => "dead_reckoned",
    }
}

/// Scan-matching half of the estimator: LIV buffering, cloud conversion,
/// and the stateful localizer.
struct ScanPipe {
    localizer: ScanLocalizer,
    liv: LivParams,
    imu_buf: Vec<ImuSample>,
    veh_buf: Vec<VehicleSample>,
    leaf: f64,
    k_neighbors: usize,
    kernel: KernelDescriptor,
    workers: usize,
}

/// The fusion filter advanced tick by tick over a frame stream. Owns every
/// output row so the open- and closed-loop drivers stay thin.
struct Fusion {
    dt: f64,
    gps_divisor: u64,
    state: VehicleState,
    started: bool,
    queue: MeasurementQueue,
    thresholds: GateThresholds,
    q: ProcessNoise,
    scan: Option<ScanPipe>,
    reject_streak: u32,
    truth: Vec<(Timestamp, Pose2)>,
    estimate: Vec<EstimateRow>,
    diagnostics: Vec<DiagRow>,
    scans: Vec<ScanRecord>,
}

impl Fusion {
    fn new(cfg: &ScenarioConfig, start: &VehicleState, map: Option<TrackMap>) -> Fusion {
        let scan = map.map(|m| ScanPipe {
            localizer: ScanLocalizer::new(m, cfg.localizer_params()),
            liv: cfg.liv_params(),
            imu_buf: Vec::new(),
            veh_buf: Vec::new(),
            leaf: cfg.localizer.scan_leaf,
            k_neighbors: cfg.localizer.scan_k,
            kernel: cfg.localizer.kernel.clone(),
            workers: cfg.localizer.workers,
        });
        Fusion {
            dt: cfg.run.dt,
            gps_divisor: cfg.sensor_params().gps_divisor.max(1),
            state: start.clone(),
            started: false,
            queue: MeasurementQueue::new(cfg.estimator.queue_window),
            thresholds: cfg.gate_thresholds(),
            q: cfg.process_noise(),
            scan,
            reject_streak: 0,
            truth: Vec::new(),
            estimate: Vec::new(),
            diagnostics: Vec::new(),
            scans: Vec::new(),
        }
    }

    fn pose(&self) -> Pose2 {
        self.state.pose()
    }

    /// Advances the filter over one frame: predict, localize, gate, correct.
    fn step(&mut self, frame: &SimFrame) -> Result<(), ScenarioError> {
        let t = frame.truth.t;
        self.truth.push((Timestamp(t), frame.truth.pose));

        // the initial state already sits at the first frame's time
        if self.started {
            let u = ControlInput {
                speed: frame.vehicle.speed,
                yaw_rate: frame.imu.gyro_z,
            };
            self.state = predict(&self.state, u, self.dt, &self.q);
        }
        self.started = true;

        for g in &frame.gps {
            self.queue.push(Measurement {
                source: SourceId(g.unit),
                timestamp: Timestamp(g.t),
                pose: g.pose,
                sigma: g.sigma,
            });
        }

        if let Some(pipe) = self.scan.as_mut() {
            pipe.imu_buf.push(frame.imu);
            pipe.veh_buf.push(frame.vehicle);
        }
        if let Some(scan) = &frame.scan {
            if let Some(pipe) = self.scan.as_mut() {
                let delta = if pipe.imu_buf.len() >= 2 {
                    integrate(&pipe.imu_buf, &pipe.veh_buf, &pipe.liv).ok()
                } else {
                    None
                };
                let anchor = self.state.pose();
                match scan_to_cloud(
                    &scan.points,
                    pipe.leaf,
                    pipe.k_neighbors,
                    &pipe.kernel,
                    pipe.workers,
                ) {
                    Ok(cloud) => {
                        let fix = pipe
                            .localizer
                            .check_and_recover(&cloud, Some(anchor), delta.as_ref())
                            .map_err(|e| ScenarioError::Runtime(format!("scan localizer: {e}")))?;
                        record_scan(
                            &mut self.diagnostics,
                            &mut self.scans,
                            t,
                            frame.truth.pose,
                            &fix,
                        );
                        if fix.result.reliability
                            >= pipe.localizer.params.reliability_threshold
                        {
                            let p = fix.result.pose;
                            self.queue.push(Measurement {
                                source: SourceId::SCAN,
                                timestamp: Timestamp(t),
                                pose: Vector3::new(p.x, p.y, p.theta),
                                sigma: fix.result.covariance,
                            });
                        }
                    }
                    Err(err) => {
                        // a scan too degenerate to form a cloud is skipped,
                        // not fatal; the filter coasts on GPS
                        let mut row = DiagRow::empty(t, "scan");
                        row.source_id = Some(SourceId::SCAN.0);
                        row.decision = "unusable".to_string();
                        row.reason = err.to_string();
                        self.diagnostics.push(row);
                    }
                }
                // the current sample opens the next pre-integration window
                let last_imu = *pipe.imu_buf.last().expect("pushed above");
                let last_veh = *pipe.veh_buf.last().expect("pushed above");
                pipe.imu_buf.clear();
                pipe.veh_buf.clear();
                pipe.imu_buf.push(last_imu);
                pipe.veh_buf.push(last_veh);
            }
        }

        let drained = self.queue.drain_ready(t);
        let mut tick_label: Option<String> = None;
        let mut tick_accepted = false;
        let mut idx = 0;
        while idx < drained.len() {
            let group_t = drained[idx].timestamp.0;
            let mut end = idx;
            while end < drained.len() && (drained[end].timestamp.0 - group_t).abs() < 1e-9 {
                end += 1;
            }
            let group = &drained[idx..end];
            idx = end;

            let mut deltas = Vec::with_capacity(group.len());
            for m in group {
                let d = mahalanobis(&self.state, m)
                    .map_err(|e| ScenarioError::Runtime(format!("gate distance: {e}")))?;
                deltas.push((m.source, d));
            }
            let decision = decide_gate(&deltas, &self.thresholds)
                .map_err(|e| ScenarioError::Runtime(format!("gate decision: {e}")))?;
            self.state = correct(&self.state, &decision, group)
                .map_err(|e| ScenarioError::Runtime(format!("gate correction: {e}")))?;

            let label = decision.label();
            for (m, &(_, d)) in group.iter().zip(deltas.iter()) {
                let mut row = DiagRow::empty(t, "gate");
                row.source_id = Some(m.source.0);
                row.delta = Some(d);
                row.decision = label.clone();
                row.lambda = Some(source_weight(&decision, m.source));
                self.diagnostics.push(row);
            }
            if !matches!(decision, GateDecision::Reject) {
                tick_accepted = true;
            }
            tick_label = Some(label);
        }

        // a filter cycle is a tick where GPS is due: silence and rejection
        // both extend the streak, any accepted fix ends it
        if frame.tick % self.gps_divisor == 0 {
            if tick_accepted {
                self.reject_streak = 0;
            } else {
                self.reject_streak += 1;
            }
        }

        let pose = self.state.pose();
        if !(pose.x.is_finite() && pose.y.is_finite() && pose.theta.is_finite()) {
            return Err(ScenarioError::Runtime(format!(
                "estimate diverged to a non-finite pose at t={t:.3}"
            )));
        }
        self.estimate.push(EstimateRow {
            t,
            pose,
            decision: tick_label.unwrap_or_else(|| "predict".to_string()),
        });
        Ok(())
    }

    fn finish(
        self,
        walls: Vec<WallRecord>,
        frames: Option<Vec<SimFrame>>,
        interval: f64,
    ) -> Result<RunArtifacts, ScenarioError> {
        let est: Vec<(Timestamp, Pose2)> = self
            .estimate
            .iter()
            .map(|r| (Timestamp(r.t), r.pose))
            .collect();
        let report = trajectory_error_with_interval(&est, &self.truth, interval)
            .map_err(|e| ScenarioError::Runtime(format!("metrics: {e}")))?;
        Ok(RunArtifacts {
            truth: self.truth,
            estimate: self.estimate,
            diagnostics: self.diagnostics,
            scans: self.scans,
            walls,
            report,
            frames,
        })
    }
}

fn record_scan(
    diagnostics: &mut Vec<DiagRow>,
    scans: &mut Vec<ScanRecord>,
    t: f64,
    truth: Pose2,
    fix: &LocalizerFix,
) {
    let mut row = DiagRow::empty(t, "scan");
    row.source_id = Some(SourceId::SCAN.0);
    row.decision = fix_source_label(fix.source).to_string();
    row.lambda = Some(fix.result.reliability);
    diagnostics.push(row);
    scans.push(ScanRecord {
        t,
        source: fix.source,
        reliability: fix.result.reliability,
        pose: fix.result.pose,
        truth,
        iterations: fix
            .result
            .registration
            .as_ref()
            .map_or(0, |r| r.iterations),
    });
}

fn source_weight(decision: &GateDecision, source: SourceId) -> f64 {
    match decision {
        GateDecision::Reject => 0.0,
        GateDecision::UseQualified(s) | GateDecision::SingleFeasible(s) => {
            if *s == source {
                1.0
            } else {
                0.0
            }
        }
        GateDecision::WeightedSum(ws) => ws
            .iter()
            .find(|(s, _)| *s == source)
            .map_or(0.0, |&(_, l)| l),
    }
}

fn initial_state(cfg: &ScenarioConfig, pose: Pose2, speed: f64, yaw_rate: f64) -> VehicleState {
    let sigma = cfg.init_sigma();
    let mut diag = Vector6::zeros();
    for i in 0..6 {
        diag[i] = sigma[i] * sigma[i];
    }
    let mut state = VehicleState::from_pose(pose, diag);
    state.mean[IV] = speed;
    state.mean[IW] = yaw_rate;
    state
}

fn build_or_load_map(
    cfg: &ScenarioConfig,
    track: &TrackDefinition,
) -> Result<Option<TrackMap>, ScenarioError> {
    if !cfg.estimator.use_scan {
        return Ok(None);
    }
    let map = match &cfg.localizer.map_dir {
        Some(dir) => load_map(dir, cfg.localizer.k_neighbors, &cfg.localizer.kernel)
            .map_err(|e| ScenarioError::Runtime(format!("loading map: {e}")))?,
        None => synthesize_track_map(track, &cfg.map_build_params())
            .map_err(|e| ScenarioError::Runtime(format!("building reference map: {e}")))?,
    };
    Ok(Some(map))
}

/// Runs the configured scenario end to end and returns every artifact in
/// memory. `seed_override` replaces the config's run seed when given.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    seed_override: Option<u64>,
) -> Result<RunArtifacts, ScenarioError> {
    let mode = cfg.run_mode()?;
    let track = cfg.track_definition();
    let sim = cfg.sim_params(seed_override);
    let monitor = ResourceMonitor::start(Duration::from_millis(200));
    let mut artifacts = match mode {
        RunMode::OpenLoop => {
            let frames = simulate_scripted(&track, &sim);
            run_estimator_over(cfg, &track, frames)
        }
        RunMode::ClosedLoop => run_closed_loop(cfg, &track, &sim),
    }?;
    artifacts.report.cpu = monitor.stop();
    Ok(artifacts)
}

/// Re-runs the estimators over a persisted frame stream (the `replay`
/// path). The stream must come from a compatible config: the track section
/// is still used to build the reference map.
pub fn replay_scenario(
    cfg: &ScenarioConfig,
    frames: Vec<SimFrame>,
) -> Result<RunArtifacts, ScenarioError> {
    if frames.is_empty() {
        return Err(ScenarioError::Runtime(
            "frame stream is empty; nothing to replay".to_string(),
        ));
    }
    let track = cfg.track_definition();
    let monitor = ResourceMonitor::start(Duration::from_millis(200));
    let mut artifacts = run_estimator_over(cfg, &track, frames)?;
    artifacts.report.cpu = monitor.stop();
    Ok(artifacts)
}

/// Open-loop core: fuse a fixed frame stream, no control feedback.
fn run_estimator_over(
    cfg: &ScenarioConfig,
    track: &TrackDefinition,
    frames: Vec<SimFrame>,
) -> Result<RunArtifacts, ScenarioError> {
    let map = build_or_load_map(cfg, track)?;
    let first = frames
        .first()
        .ok_or_else(|| ScenarioError::Runtime("simulation produced no frames".to_string()))?;
    let start = initial_state(
        cfg,
        first.truth.pose,
        first.truth.speed,
        first.truth.yaw_rate,
    );
    let mut fusion = Fusion::new(cfg, &start, map);
    for frame in &frames {
        fusion.step(frame)?;
    }
    let kept = cfg.output.frames.then_some(frames);
    fusion.finish(Vec::new(), kept, cfg.output.metrics_interval)
}

/// Wall-follower state machine used by the closed-loop driver.
struct WallFollow {
    params: WallNavParams,
    half_vehicle_width: f64,
    fallback_lookahead: f64,
    engaged: bool,
    path: Option<FallbackPath>,
    steer: f64,
    hold_speed: f64,
    wheel_wall: f64,
    d_wall: Option<f64>,
    reason: &'static str,
    records: Vec<WallRecord>,
}

impl WallFollow {
    fn new(cfg: &ScenarioConfig) -> WallFollow {
        WallFollow {
            params: cfg.wall_nav_params(),
            half_vehicle_width: cfg.controller.half_vehicle_width,
            fallback_lookahead: cfg.controller.fallback_lookahead,
            engaged: false,
            path: None,
            steer: 0.0,
            hold_speed: 0.0,
            wheel_wall: f64::INFINITY,
            d_wall: None,
            reason: "clear",
            records: Vec::new(),
        }
    }

    /// Longitudinal window of scan points fed to the wall fit. The quadratic
    /// wall model cannot follow a corner arc over the full lidar range;
    /// far points drag the constant term toward zero and fake an emergency.
    const FIT_BEHIND: f64 = 5.0;
    const FIT_AHEAD: f64 = 25.0;

    /// Refits the wall from one raw scan and, while engaged, rebuilds the
    /// fallback path and steering command.
    fn on_scan(&mut self, t: f64, points: &[Point3], wheelbase: f64) {
        let near: Vec<Point3> = points
            .iter()
            .filter(|p| p.x > -Self::FIT_BEHIND && p.x < Self::FIT_AHEAD)
            .copied()
            .collect();
        let (kept, _) = voxel_downsample(&near, self.params.voxel_leaf);
        let vertical = filter_ground(&kept, self.params.cell, self.params.min_count);
        let clusters = cluster(&vertical, self.params.tolerance, self.params.min_cluster);
        match extract_wall(&clusters, self.params.side) {
            Ok(model) => {
                self.wheel_wall = model.clearance(self.half_vehicle_width);
                self.d_wall = Some(model.d_wall);
                if self.engaged {
                    match make_path(
                        &model,
                        self.params.d_gap,
                        self.params.horizon,
                        self.params.track_width,
                    ) {
                        Ok(path) => {
                            self.steer = pursuit_on_path(
                                &path,
                                self.fallback_lookahead,
                                wheelbase,
                            );
                            self.path = Some(path);
                            self.reason = "following";
                        }
                        Err(err) => {
                            self.coast(&err);
                        }
                    }
                }
            }
            Err(err) => {
                // no wall in sight: nothing to measure a gap against, so no
                // emergency either; while engaged, straighten and bleed speed
                self.wheel_wall = f64::INFINITY;
                self.d_wall = None;
                if self.engaged {
                    self.coast(&err);
                }
            }
        }
        self.records.push(WallRecord {
            t,
            engaged: self.engaged,
            d_wall: self.d_wall,
            wheel_wall: self.wheel_wall.is_finite().then_some(self.wheel_wall),
            reason: self.reason,
        });
    }

    fn coast(&mut self, err: &WallNavError) {
        log::warn!("wall follower coasting: {err}");
        self.path = None;
        self.steer = 0.0;
        self.hold_speed *= 0.98;
        self.reason = "no_wall_coast";
    }

    /// Updates the engagement latch from the filter's reject streak; called
    /// once per filter cycle. Returns true on a fresh engagement.
    fn decide(&mut self, reject_streak: u32, t: f64, nominal_speed: f64) -> bool {
        let now = engage(
            reject_streak,
            self.wheel_wall,
            self.params.emergency_threshold,
        );
        let fresh = now && !self.engaged;
        if fresh {
            self.hold_speed = nominal_speed;
            self.reason = if self.wheel_wall < self.params.emergency_threshold {
                "emergency"
            } else {
                "reject_streak"
            };
            self.records.push(WallRecord {
                t,
                engaged: true,
                d_wall: self.d_wall,
                wheel_wall: self.wheel_wall.is_finite().then_some(self.wheel_wall),
                reason: self.reason,
            });
        }
        if !now && self.engaged {
            self.reason = "reverted";
            self.path = None;
            self.records.push(WallRecord {
                t,
                engaged: false,
                d_wall: self.d_wall,
                wheel_wall: self.wheel_wall.is_finite().then_some(self.wheel_wall),
                reason: self.reason,
            });
        }
        self.engaged = now;
        fresh
    }
}

/// Pure pursuit steering toward a body-frame path sampled at 1 m.
fn pursuit_on_path(path: &FallbackPath, lookahead: f64, wheelbase: f64) -> f64 {
    let idx = (lookahead.round() as usize).min(path.points.len().saturating_sub(1));
    let (x, y) = path.points[idx];
    pursuit_steer(x, y, wheelbase)
}

/// Pure pursuit on a body-frame target point.
fn pursuit_steer(x: f64, y: f64, wheelbase: f64) -> f64 {
    let dist2 = x * x + y * y;
    if dist2 < 1e-6 {
        return 0.0;
    }
    // curvature of the arc through the origin (heading +x) and the target
    let kappa = 2.0 * y / dist2;
    (wheelbase * kappa).atan()
}

fn run_closed_loop(
    cfg: &ScenarioConfig,
    track: &TrackDefinition,
    sim_params: &SimParams,
) -> Result<RunArtifacts, ScenarioError> {
    let map = build_or_load_map(cfg, track)?;
    let profile = SpeedProfile::build(track, sim_params.v_max, sim_params.a_lat, sim_params.a_lon);
    let mut sim = ClosedLoopSim::new(track, sim_params);
    let wheelbase = sim_params.sensors.wheelbase;
    let gps_divisor = sim_params.sensors.gps_divisor.max(1);
    // the boundary wall stands one setback beyond the paved edge; touching
    // it is the run-ending invariant
    let wall_lateral = track.half_width + sim_params.sensors.sampling.wall_setback;

    let start = initial_state(cfg, sim.truth_pose(), 0.0, 0.0);
    let mut fusion = Fusion::new(cfg, &start, map);
    let mut wall = WallFollow::new(cfg);
    let mut hint = None;
    let mut nominal_speed = 0.0;
    let mut frames_kept: Vec<SimFrame> = Vec::new();

    for tick in 0..sim.ticks() {
        // steer from the latest posterior; the estimate is all the
        // controller is allowed to see
        let est = fusion.pose();
        let cmd = if wall.engaged {
            DriveCommand {
                speed: wall.hold_speed,
                steer: wall.steer,
            }
        } else {
            let proj = track.project(est.x, est.y, hint);
            hint = Some(proj.index);
            nominal_speed = profile.at(track, proj.s) * cfg.controller.speed_factor;
            let ahead = track.sample_at(proj.s + cfg.controller.lookahead);
            let body = est.inverse().compose(&Pose2::new(ahead.x, ahead.y, ahead.heading));
            DriveCommand {
                speed: nominal_speed,
                steer: pursuit_steer(body.x, body.y, wheelbase),
            }
        };

        let frame = sim.step(cmd);
        fusion.step(&frame)?;
        if let Some(scan) = &frame.scan {
            wall.on_scan(frame.truth.t, &scan.points, wheelbase);
        }
        if tick % gps_divisor == 0 {
            wall.decide(fusion.reject_streak, frame.truth.t, nominal_speed);
        }

        if frame.truth.lateral.abs() >= wall_lateral {
            return Err(ScenarioError::Runtime(format!(
                "wall contact at t={:.2}: lateral {:.2} m reached the boundary at {:.2} m",
                frame.truth.t, frame.truth.lateral, wall_lateral
            )));
        }
        if cfg.output.frames {
            frames_kept.push(frame);
        }
    }

    let kept = cfg.output.frames.then_some(frames_kept);
    fusion.finish(wall.records, kept, cfg.output.metrics_interval)
}

/// Writes a frame stream as one JSON record per line.
pub fn write_frames(frames: &[SimFrame], path: &Path) -> Result<(), ScenarioError> {
    let file = std::fs::File::create(path).map_err(|e| ScenarioError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for frame in frames {
        let line = serde_json::to_string(frame)
            .map_err(|e| ScenarioError::Runtime(format!("serializing frame: {e}")))?;
        writeln!(w, "{line}").map_err(|e| ScenarioError::io(path, e))?;
    }
    w.flush().map_err(|e| ScenarioError::io(path, e))
}

/// Reads a line-delimited frame stream; parse failures carry file and line.
pub fn read_frames(path: &Path) -> Result<Vec<SimFrame>, ScenarioError> {
    let file = std::fs::File::open(path).map_err(|e| ScenarioError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut frames = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ScenarioError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: SimFrame =
            serde_json::from_str(&line).map_err(|e| ScenarioError::Frames {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        frames.push(frame);
    }
    Ok(frames)
}

/// Everything the map-building run reports.
#[derive(Debug, Clone)]
pub struct BuildMapSummary {
    pub keyframes: usize,
    pub loops: usize,
    pub optimize: OptimizeReport,
    /// Transform aligning the odometry frame onto the GPS frame.
    pub alignment: Pose2,
    pub buckets: usize,
    pub expected_buckets: usize,
    /// Laps actually covered by the input frames.
    pub laps_covered: f64,
    pub endpoint_drift_odometry: f64,
    pub endpoint_drift_optimized: f64,
}

/// Map construction from driving data alone: LIV odometry chains the
/// keyframes, arc-bucket loop closures stitch the laps, the optimized graph
/// is aligned onto the GPS frame, and every scan is dropped into the track
/// map at its unified pose.
pub fn build_map_run(
    cfg: &ScenarioConfig,
    seed_override: Option<u64>,
    map_out: &Path,
) -> Result<BuildMapSummary, ScenarioError> {
    let bm = &cfg.build_map;
    if bm.laps < 2 {
        return Err(ConfigError::Invalid {
            path: cfg.source_path.clone(),
            key: "build_map.laps".to_string(),
            message: format!("map building needs at least 2 laps, got {}", bm.laps),
        }
        .into());
    }
    let track = cfg.track_definition();
    let frames = match &bm.frames {
        Some(path) => read_frames(path)?,
        None => {
            let mut sim = cfg.sim_params(seed_override);
            sim.duration = estimate_lap_time(&track, &sim) * bm.laps as f64 * 1.1 + 2.0;
            simulate_scripted(&track, &sim)
        }
    };

    // travelled distance, for lap accounting and keyframe spacing
    let dt = cfg.run.dt;
    let mut travelled = vec![0.0f64; frames.len()];
    for i in 1..frames.len() {
        travelled[i] = travelled[i - 1] + frames[i - 1].truth.speed * dt;
    }
    let need = bm.laps as f64 * track.length;
    let laps_covered = travelled.last().copied().unwrap_or(0.0) / track.length;
    if travelled.last().copied().unwrap_or(0.0) < need - 1e-6 {
        return Err(ConfigError::Invalid {
            path: cfg.source_path.clone(),
            key: "build_map.laps".to_string(),
            message: format!(
                "input covers {laps_covered:.2} laps but {} laps are required",
                bm.laps
            ),
        }
        .into());
    }

    // keyframes: scan ticks spaced along the travelled distance, each with
    // a GPS reference fix
    let mut keyframes: Vec<usize> = Vec::new();
    let mut last_d = f64::NEG_INFINITY;
    for (i, frame) in frames.iter().enumerate() {
        if travelled[i] > need {
            break;
        }
        if frame.scan.is_none() || frame.gps.iter().all(|g| g.unit != 0) {
            continue;
        }
        if travelled[i] - last_d >= bm.keyframe_spacing {
            keyframes.push(i);
            last_d = travelled[i];
        }
    }
    if keyframes.len() < 3 {
        return Err(ScenarioError::Runtime(format!(
            "only {} keyframes found; the stream is too sparse to map",
            keyframes.len()
        )));
    }
    let gps_poses: Vec<Pose2> = keyframes
        .iter()
        .map(|&i| {
            let g = frames[i]
                .gps
                .iter()
                .find(|g| g.unit == 0)
                .expect("keyframes filtered on unit 0");
            Pose2::new(g.pose[0], g.pose[1], g.pose[2])
        })
        .collect();

    // odometry chain between keyframes
    let odo_info = info_diag(bm.odometry_sigma_xy, bm.odometry_sigma_theta);
    let loop_info = info_diag(bm.loop_sigma_xy, bm.loop_sigma_theta);
    let liv = cfg.liv_params();
    let mut graph = PoseGraph::new();
    graph
        .add_odometry(gps_poses[0], loop_info)
        .map_err(|e| ScenarioError::Runtime(format!("anchoring pose graph: {e}")))?;
    for w in keyframes.windows(2) {
        let (a, b) = (w[0], w[1]);
        let imu: Vec<ImuSample> = frames[a..=b].iter().map(|f| f.imu).collect();
        let veh: Vec<VehicleSample> = frames[a..=b].iter().map(|f| f.vehicle).collect();
        let delta = integrate(&imu, &veh, &liv)
            .map_err(|e| ScenarioError::Runtime(format!("pre-integration: {e}")))?;
        let rel = Pose2::new(delta.delta_xy.x, delta.delta_xy.y, delta.delta_yaw);
        graph
            .add_odometry(rel, odo_info)
            .map_err(|e| ScenarioError::Runtime(format!("odometry factor: {e}")))?;
    }
    let endpoint_drift_odometry = graph
        .nodes()
        .last()
        .expect("graph anchored")
        .position_distance(gps_poses.last().expect("nonempty"));

    // loop closures via the arc-bucket index over the GPS references
    let index = RacetrackIndex::build(&track, &gps_poses, bm.bucket_length);
    let mut matcher = PoseLoopMatcher {
        reference: gps_poses.clone(),
        max_distance: bm.loop_max_distance,
        information: loop_info,
    };
    let loops = detect_loops(&index, bm.loop_min_gap, &mut matcher);
    let n_loops = loops.len();
    for f in &loops {
        graph
            .add_loop(f.from, f.to, f.delta, f.information)
            .map_err(|e| ScenarioError::Runtime(format!("loop factor: {e}")))?;
    }

    let optimize = graph
        .optimize(&OptimizeParams::default())
        .map_err(|e| ScenarioError::Runtime(format!("graph optimization: {e}")))?;
    let endpoint_drift_optimized = graph
        .nodes()
        .last()
        .expect("graph anchored")
        .position_distance(gps_poses.last().expect("nonempty"));

    let alignment = unify_frames(graph.nodes(), &gps_poses)
        .map_err(|e| ScenarioError::Runtime(format!("frame unification: {e}")))?;

    // drop every keyframe scan into arc buckets at its unified pose
    let expected_buckets = (track.length / bm.bucket_length).ceil() as usize;
    let centers: Vec<Pose2> = (0..expected_buckets)
        .map(|k| track.pose_at((k as f64 + 0.5) * bm.bucket_length))
        .collect();
    let mut bucket_points: Vec<Vec<Point3>> = vec![Vec::new(); expected_buckets];
    let mut proj_hint = None;
    for (ki, &fi) in keyframes.iter().enumerate() {
        let node = graph.node(ki);
        let world = alignment.compose(&node);
        let proj = track.project(world.x, world.y, proj_hint);
        proj_hint = Some(proj.index);
        let z_vehicle = track.surface_point(proj.s, proj.lateral).z;
        let vehicle_key = (proj.s / bm.bucket_length).floor() as i64;
        let scan = frames[fi].scan.as_ref().expect("keyframes are scan ticks");
        for p in &scan.points {
            let (wx, wy) = world.transform_xy(p.x, p.y);
            let wz = p.z + z_vehicle;
            // candidate buckets near the vehicle; scans reach tens of
            // meters, never a half lap
            let mut best = (f64::INFINITY, vehicle_key);
            for dk in -9i64..=9 {
                let k = (vehicle_key + dk).rem_euclid(expected_buckets as i64);
                let c = &centers[k as usize];
                let d = (c.x - wx).powi(2) + (c.y - wy).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            bucket_points[best.1 as usize].push(Point3::new(wx, wy, wz));
        }
    }

    let mut map = TrackMap::new(bm.bucket_length, track.half_width, track.length);
    for (k, points) in bucket_points.iter().enumerate() {
        if points.is_empty() {
            continue;
        }
        let (kept, _) = voxel_downsample(points, cfg.localizer.leaf_size * 0.35);
        let cloud = estimate_covariances(
            &kept,
            Frame::Map,
            cfg.localizer.leaf_size,
            cfg.localizer.k_neighbors,
            &cfg.localizer.kernel,
            cfg.localizer.workers,
        )
        .map_err(|e| ScenarioError::Runtime(format!("bucket {k} covariances: {e}")))?;
        map.insert(
            k as i64,
            MapBucket {
                cloud,
                reference: centers[k],
            },
        );
    }
    let buckets = map.len();
    crate::localizer::save_map(&map, map_out)
        .map_err(|e| ScenarioError::Runtime(format!("saving map: {e}")))?;

    Ok(BuildMapSummary {
        keyframes: keyframes.len(),
        loops: n_loops,
        optimize,
        alignment,
        buckets,
        expected_buckets,
        laps_covered,
        endpoint_drift_odometry,
        endpoint_drift_optimized,
    })
}

fn info_diag(sigma_xy: f64, sigma_theta: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(
        1.0 / (sigma_xy * sigma_xy),
        1.0 / (sigma_xy * sigma_xy),
        1.0 / (sigma_theta * sigma_theta),
    ))
}

/// Rough lap time from the curvature-limited speed profile.
fn estimate_lap_time(track: &TrackDefinition, sim: &SimParams) -> f64 {
    let profile = SpeedProfile::build(track, sim.v_max, sim.a_lat, sim.a_lon);
    let mut t = 0.0;
    let step = track.ds.max(0.5);
    let mut s = 0.0;
    while s < track.length {
        let v = profile.at(track, s).max(1.0);
        t += step / v;
        s += step;
    }
    t
}

/// One row of the kernel benchmark table.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub kernel: String,
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub converged: usize,
    pub pairs: usize,
}

/// Registers a corpus of synthetic clouds under known rigid transforms with
/// every kernel and scores the recovery error.
pub fn bench_registration(
    cfg: &ScenarioConfig,
    seed_override: Option<u64>,
) -> Result<Vec<BenchRow>, ScenarioError> {
    let b = &cfg.bench;
    if b.pairs == 0 {
        return Err(ConfigError::Invalid {
            path: cfg.source_path.clone(),
            key: "bench.pairs".to_string(),
            message: "corpus is empty; nothing to benchmark".to_string(),
        }
        .into());
    }
    let seed = seed_override.unwrap_or(cfg.run.seed);
    let track = cfg.track_definition();
    let mut sampling = cfg.surface_sampling();
    if b.planar_only {
        // strip every vertical feature so the corpus is a bare road band
        sampling.wall_fraction = 0.0;
        sampling.board_fraction = 0.0;
    }

    let kernels: Vec<KernelDescriptor> = vec![
        KernelDescriptor::Rbf { sigma: 1.0 },
        KernelDescriptor::Gaussian { sigma: 1.0 },
        KernelDescriptor::Polynomial {
            alpha: 1.0,
            c: 0.1,
            degree: 2,
        },
        KernelDescriptor::HistogramIntersection,
        KernelDescriptor::Laplacian { sigma: 1.0 },
    ];

    // fixed per-pair geometry shared by all kernels
    struct Pair {
        target: Vec<Point3>,
        source: Vec<Point3>,
        truth: RigidTransform3,
    }
    let mut pairs = Vec::with_capacity(b.pairs);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(40);
    for i in 0..b.pairs {
        let s = (i as f64 + 0.5) / b.pairs as f64 * track.length;
        let (world, _) = sample_surface_points(&track, s, 10.0, 20.0, b.points, &sampling, &mut rng);
        let pose = track.pose_at(s);
        let into_body = RigidTransform3::from_pose2(&pose).inverse();
        let mut base: Vec<Point3> =
            world.iter().map(|p| into_body.transform_point(p)).collect();
        // the histogram kernel reads raw coordinates and rejects negative
        // ones, so park every corpus cloud deep in the positive octant
        let mut low = Vector3::from_element(f64::INFINITY);
        for p in &base {
            low = low.inf(&p.coords);
        }
        let margin = Vector3::from_element(12.0) - low;
        for p in &mut base {
            p.coords += margin;
        }
        let centroid =
            base.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / base.len() as f64;

        // rotate about the cloud, not the origin, so the perturbation stays
        // within the advertised translation budget
        let yaw = rng.random_range(-b.max_rotation..b.max_rotation);
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let mag = rng.random_range(0.0..b.max_translation);
        let spin = RigidTransform3::from_yaw_xy(yaw, 0.0, 0.0);
        let truth = RigidTransform3::new(
            spin.rotation,
            centroid - spin.rotation * centroid
                + Vector3::new(mag * ang.cos(), mag * ang.sin(), 0.0),
        );

        let jitter = |pts: &[Point3], rng: &mut ChaCha12Rng| -> Vec<Point3> {
            pts.iter()
                .map(|p| {
                    Point3::new(
                        p.x + rng.random_range(-1.0..1.0) * b.noise_sigma,
                        p.y + rng.random_range(-1.0..1.0) * b.noise_sigma,
                        p.z + rng.random_range(-1.0..1.0) * b.noise_sigma,
                    )
                })
                .collect()
        };
        let source = jitter(&base, &mut rng);
        let target: Vec<Point3> = jitter(&base, &mut rng)
            .iter()
            .map(|p| truth.transform_point(p))
            .collect();
        pairs.push(Pair {
            target,
            source,
            truth,
        });
    }

    let reg = RegistrationParams::default();
    let mut rows = Vec::with_capacity(kernels.len());
    for kernel in &kernels {
        let mut errors = Vec::with_capacity(pairs.len());
        let mut converged = 0;
        for pair in &pairs {
            let source = scan_to_cloud(&pair.source, 1.0, 8, kernel, 1)
                .map_err(|e| ScenarioError::Runtime(format!("bench cloud: {e}")))?;
            let (kept, _) = voxel_downsample(&pair.target, 0.35);
            let target = estimate_covariances(&kept, Frame::Map, 1.0, 8, kernel, 1)
                .map_err(|e| ScenarioError::Runtime(format!("bench cloud: {e}")))?;
            let guess = RigidTransform3::identity();
            match register(&source, &target, &guess, &reg) {
                Ok(result) => {
                    if result.converged {
                        converged += 1;
                    }
                    let dt = result.transform.translation - pair.truth.translation;
                    errors.push(dt.norm());
                }
                Err(_) => {
                    // ill-conditioned pairs count as non-converged with the
                    // full guess error
                    errors.push(pair.truth.translation.norm());
                }
            }
        }
        errors.sort_by(|a, b| a.total_cmp(b));
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let median = if errors.len() % 2 == 1 {
            errors[errors.len() / 2]
        } else {
            0.5 * (errors[errors.len() / 2 - 1] + errors[errors.len() / 2])
        };
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        rows.push(BenchRow {
            kernel: kernel.name().to_string(),
            rmse,
            mean,
            median,
            std: var.sqrt(),
            converged,
            pairs: pairs.len(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::config::ScenarioConfig;

    fn parse(text: &str) -> ScenarioConfig {
        ScenarioConfig::parse(text, "test").unwrap()
    }

    fn short_open_loop(seed: u64, use_scan: bool) -> ScenarioConfig {
        parse(&format!(
            "schema_version = 1\n\n[track]\nkind = \"oval\"\n\n[run]\nduration = 6.0\nseed = {seed}\nv_max = 15.0\n\n\
             [estimator]\nuse_scan = {use_scan}\n"
        ))
    }

    #[test]
    fn clean_open_loop_tracks_truth() {
        let cfg = short_open_loop(3, false);
        let run = run_scenario(&cfg, None).unwrap();
        assert_eq!(run.estimate.len(), run.truth.len());
        assert!(
            run.report.error.rmse < 0.1,
            "clean fused rmse {:.4}",
            run.report.error.rmse
        );
        // every fifth tick carries a gate decision, the rest predict
        let gates = run
            .estimate
            .iter()
            .filter(|r| r.decision != "predict")
            .count();
        assert!(gates >= run.estimate.len() / 5 - 1);
        assert!(run.diagnostics.iter().any(|d| d.kind == "gate"));
    }

    #[test]
    fn same_seed_reproduces_identical_artifacts() {
        let cfg = short_open_loop(4, false);
        let a = run_scenario(&cfg, None).unwrap();
        let b = run_scenario(&cfg, None).unwrap();
        assert_eq!(a.estimate.len(), b.estimate.len());
        for (ra, rb) in a.estimate.iter().zip(b.estimate.iter()) {
            assert_eq!(ra.t, rb.t);
            assert_eq!(ra.pose, rb.pose);
            assert_eq!(ra.decision, rb.decision);
        }
        let c = run_scenario(&cfg, Some(5)).unwrap();
        assert!(
            c.estimate
                .iter()
                .zip(a.estimate.iter())
                .any(|(rc, ra)| rc.pose != ra.pose),
            "a different seed must change the run"
        );
    }

    #[test]
    fn scan_fixes_enter_the_gate() {
        let cfg = short_open_loop(6, true);
        let run = run_scenario(&cfg, None).unwrap();
        assert!(!run.scans.is_empty(), "lidar ticks must produce fixes");
        let accepted = run
            .scans
            .iter()
            .filter(|s| s.source == FixSource::ScanMatch)
            .count();
        assert!(
            accepted * 2 > run.scans.len(),
            "most scans on a clean run must match: {accepted}/{}",
            run.scans.len()
        );
        for s in &run.scans {
            if s.source == FixSource::ScanMatch {
                assert!(
                    s.pose.position_distance(&s.truth) < 0.5,
                    "accepted fix off truth by {:.3}",
                    s.pose.position_distance(&s.truth)
                );
            }
        }
        assert!(run
            .diagnostics
            .iter()
            .any(|d| d.kind == "gate" && d.source_id == Some(SourceId::SCAN.0)));
    }

    #[test]
    fn closed_loop_drives_the_oval_cleanly() {
        let cfg = parse(
            "schema_version = 1\n[track]\nkind = \"oval\"\n\
             [run]\nmode = \"closed_loop\"\nduration = 12.0\nseed = 14\nv_max = 14.0\n\
             [estimator]\nuse_scan = false\n",
        );
        let run = run_scenario(&cfg, None).unwrap();
        assert_eq!(run.estimate.len(), 1200);
        assert!(
            run.report.error.rmse < 0.2,
            "closed-loop rmse {:.4}",
            run.report.error.rmse
        );
        // the controller has to actually get the car moving
        let (_, p0) = run.truth.first().unwrap();
        let (_, pn) = run.truth.last().unwrap();
        assert!(
            p0.position_distance(pn) > 40.0,
            "vehicle moved only {:.1} m",
            p0.position_distance(pn)
        );
        // wall scans are observed even when never engaged
        assert!(!run.walls.is_empty());
        assert!(run.walls.iter().all(|w| !w.engaged));
        assert!(run.walls.iter().any(|w| w.wheel_wall.is_some()));
    }

    #[test]
    fn frame_round_trip_preserves_the_stream() {
        let cfg = short_open_loop(7, false);
        let track = cfg.track_definition();
        let frames = simulate_scripted(&track, &cfg.sim_params(None));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        write_frames(&frames, &path).unwrap();
        let back = read_frames(&path).unwrap();
        assert_eq!(frames.len(), back.len());
        assert_eq!(frames[0], back[0]);
        assert_eq!(frames.last(), back.last());

        // replay over the stream matches the rows of a direct run
        let direct = run_scenario(&cfg, None).unwrap();
        let replay = replay_scenario(&cfg, back).unwrap();
        for (a, b) in direct.estimate.iter().zip(replay.estimate.iter()) {
            assert_eq!(a.pose, b.pose);
        }
    }

    #[test]
    fn corrupted_frame_stream_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        let cfg = short_open_loop(8, false);
        let track = cfg.track_definition();
        let mut sim = cfg.sim_params(None);
        sim.duration = 0.2;
        let frames = simulate_scripted(&track, &sim);
        write_frames(&frames, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        let insert_at = text.find('\n').unwrap() + 1;
        text.insert_str(insert_at, "{not json}\n");
        std::fs::write(&path, text).unwrap();
        match read_frames(&path) {
            Err(ScenarioError::Frames { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a frame parse error, got {other:?}"),
        }
    }

    #[test]
    fn bench_rows_cover_every_kernel() {
        let mut cfg = short_open_loop(9, false);
        cfg.bench.pairs = 3;
        cfg.bench.points = 700;
        let rows = bench_registration(&cfg, None).unwrap();
        assert_eq!(rows.len(), 5);
        let names: Vec<&str> = rows.iter().map(|r| r.kernel.as_str()).collect();
        assert!(names.contains(&"laplacian") && names.contains(&"rbf"));
        for row in &rows {
            assert_eq!(row.pairs, 3);
            assert!(row.rmse.is_finite());
            assert!(row.rmse >= row.mean * 0.99, "rmse dominates mean");
        }
    }

    #[test]
    fn empty_bench_corpus_is_a_config_error() {
        let mut cfg = short_open_loop(10, false);
        cfg.bench.pairs = 0;
        match bench_registration(&cfg, None) {
            Err(ScenarioError::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
