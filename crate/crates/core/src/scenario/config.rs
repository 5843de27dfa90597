//! Versioned TOML scenario schema.
//!
//! Every section is optional except `[track]`, every field inside a section
//! is optional with library defaults, and unknown keys anywhere are a hard
//! error: a typo in a tunable must fail the run, not silently fall back to
//! a default. Parse errors carry the file position; semantic errors name
//! the offending key.

use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector6};
use serde::Deserialize;
use thiserror::Error;

use crate::ekf::{GateThresholds, ProcessNoise};
use crate::liv::LivParams;
use crate::localizer::{LocalizerParams, MapBuildParams};
use crate::registration::KernelDescriptor;
use crate::sim::{
    oval, road_course, BankParams, NoiseSchedule, NoiseWindow, OvalParams, RoadCourseParams,
    SensorParams, SensorTarget, SimParams, SurfaceSampling, TrackDefinition,
};
use crate::wall::{Side, WallNavParams};

/// Schema revision this build understands.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {key}: {message}")]
    Invalid {
        path: String,
        key: String,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn invalid(path: &str, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub track: TrackSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub sensors: SensorsSection,
    #[serde(default)]
    pub noise: Vec<NoiseEntry>,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub liv: LivSection,
    #[serde(default)]
    pub localizer: LocalizerSection,
    #[serde(default)]
    pub wall_nav: WallNavSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub build_map: BuildMapSection,
    #[serde(default)]
    pub bench: BenchSection,
    /// Remembered so later errors can point at the file.
    #[serde(skip)]
    pub source_path: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSection {
    pub kind: String,
    pub half_width: Option<f64>,
    /// Centerline sample spacing.
    pub ds: Option<f64>,
    pub bank_max: Option<f64>,
    pub bank_kappa_ref: Option<f64>,
    // oval geometry
    pub straight: Option<f64>,
    pub radius: Option<f64>,
    pub ramp: Option<f64>,
    // road course geometry
    pub base_radius: Option<f64>,
    pub min_corners: Option<usize>,
    /// Layout seed, road course only.
    pub layout_seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub mode: String,
    pub duration: f64,
    pub dt: f64,
    pub seed: u64,
    pub start_s: f64,
    pub v_max: f64,
    pub a_lat: f64,
    pub a_lon: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        let base = SimParams::default();
        RunSection {
            mode: "open_loop".to_string(),
            duration: base.duration,
            dt: base.dt,
            seed: base.seed,
            start_s: base.start_s,
            v_max: base.v_max,
            a_lat: base.a_lat,
            a_lon: base.a_lon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    OpenLoop,
    ClosedLoop,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorsSection {
    pub wheelbase: Option<f64>,
    pub gps_divisor: Option<u64>,
    pub gps_units: Option<u8>,
    pub gps_sigma_xy: Option<f64>,
    pub gps_sigma_heading: Option<f64>,
    pub gps_reported_sigma_xy: Option<f64>,
    pub gps_reported_sigma_heading: Option<f64>,
    pub gyro_sigma: Option<f64>,
    pub gyro_bias: Option<f64>,
    pub speed_sigma: Option<f64>,
    pub steer_sigma: Option<f64>,
    pub lidar_divisor: Option<u64>,
    pub lidar_points: Option<usize>,
    pub lidar_sigma: Option<f64>,
    pub lidar_behind: Option<f64>,
    pub lidar_ahead: Option<f64>,
    #[serde(default)]
    pub sampling: SamplingSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub wall_fraction: Option<f64>,
    pub wall_height: Option<f64>,
    pub wall_setback: Option<f64>,
    pub board_fraction: Option<f64>,
    pub board_spacing: Option<f64>,
    pub board_width: Option<f64>,
    pub board_height: Option<f64>,
    pub board_setback: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEntry {
    /// `gps0`, `gps1`, `lidar`, or `gyro`.
    pub target: String,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default)]
    pub sigma: f64,
    /// Constant position offset, GPS targets only.
    #[serde(default)]
    pub bias: [f64; 2],
    #[serde(default)]
    pub dropout: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub epsilon: f64,
    pub delta: f64,
    /// Reorder window of the measurement queue, seconds.
    pub queue_window: f64,
    pub use_scan: bool,
    pub process_noise: [f64; 6],
    /// Initial standard deviations (x, y, theta, bias, v, w).
    pub init_sigma: [f64; 6],
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let gate = GateThresholds::default();
        let q = ProcessNoise::default();
        EstimatorSection {
            epsilon: gate.epsilon,
            delta: gate.delta,
            queue_window: 0.0,
            use_scan: true,
            process_noise: [q.diag[0], q.diag[1], q.diag[2], q.diag[3], q.diag[4], q.diag[5]],
            init_sigma: [0.3, 0.3, 0.05, 0.01, 0.5, 0.1],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LivSection {
    /// Gyro weight in the yaw-rate blend.
    pub alpha: f64,
}

impl Default for LivSection {
    fn default() -> Self {
        LivSection {
            alpha: LivParams::default().alpha,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizerSection {
    pub window_radius: f64,
    pub reliability_threshold: f64,
    pub sigma_xy: f64,
    pub sigma_theta: f64,
    pub cost_scale: f64,
    pub max_seed_speed: f64,
    pub gps_consistency_radius: f64,
    /// Load a persisted map instead of synthesizing one.
    pub map_dir: Option<PathBuf>,
    pub map_seed: u64,
    pub bucket_length: f64,
    pub points_per_bucket: usize,
    pub leaf_size: f64,
    pub k_neighbors: usize,
    pub kernel: KernelDescriptor,
    /// Leaf size for converting live scans to Gaussian clouds.
    pub scan_leaf: f64,
    pub scan_k: usize,
    pub workers: usize,
}

impl Default for LocalizerSection {
    fn default() -> Self {
        let p = LocalizerParams::default();
        let m = MapBuildParams::default();
        LocalizerSection {
            window_radius: p.window_radius,
            reliability_threshold: p.reliability_threshold,
            sigma_xy: p.sigma_xy,
            sigma_theta: p.sigma_theta,
            cost_scale: p.cost_scale,
            max_seed_speed: p.max_seed_speed,
            gps_consistency_radius: p.gps_consistency_radius,
            map_dir: None,
            map_seed: m.seed,
            bucket_length: m.bucket_length,
            points_per_bucket: m.points_per_bucket,
            leaf_size: m.leaf_size,
            k_neighbors: m.k_neighbors,
            kernel: m.kernel,
            scan_leaf: 1.0,
            scan_k: 8,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WallNavSection {
    pub voxel_leaf: f64,
    pub cell: f64,
    pub min_count: usize,
    pub tolerance: f64,
    pub min_cluster: usize,
    /// `left` or `right`.
    pub side: String,
    pub d_gap: f64,
    pub horizon: f64,
    pub track_width: f64,
    pub emergency_threshold: f64,
}

impl Default for WallNavSection {
    fn default() -> Self {
        let p = WallNavParams::default();
        WallNavSection {
            voxel_leaf: p.voxel_leaf,
            cell: p.cell,
            min_count: p.min_count,
            tolerance: p.tolerance,
            min_cluster: p.min_cluster,
            side: "right".to_string(),
            d_gap: p.d_gap,
            horizon: p.horizon,
            track_width: p.track_width,
            emergency_threshold: p.emergency_threshold,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    /// Pure pursuit lookahead on the nominal race line.
    pub lookahead: f64,
    /// Fraction of the curvature-limited profile speed to command.
    pub speed_factor: f64,
    /// Lookahead while following the fallback wall path.
    pub fallback_lookahead: f64,
    pub half_vehicle_width: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            lookahead: 12.0,
            speed_factor: 0.9,
            fallback_lookahead: 10.0,
            half_vehicle_width: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Also persist the raw frame stream for `replay`.
    pub frames: bool,
    /// Seconds per metrics interval row.
    pub metrics_interval: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            frames: false,
            metrics_interval: crate::metrics::DEFAULT_INTERVAL_SECONDS,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildMapSection {
    pub laps: u32,
    /// Meters of travel between pose-graph keyframes.
    pub keyframe_spacing: f64,
    pub bucket_length: f64,
    /// Minimum keyframe index gap for a loop closure.
    pub loop_min_gap: usize,
    /// Maximum reference distance for a loop match.
    pub loop_max_distance: f64,
    pub loop_sigma_xy: f64,
    pub loop_sigma_theta: f64,
    pub odometry_sigma_xy: f64,
    pub odometry_sigma_theta: f64,
    /// Replay an existing frame stream instead of simulating.
    pub frames: Option<PathBuf>,
}

impl Default for BuildMapSection {
    fn default() -> Self {
        BuildMapSection {
            laps: 2,
            keyframe_spacing: 5.0,
            bucket_length: 10.0,
            loop_min_gap: 25,
            loop_max_distance: 6.0,
            loop_sigma_xy: 0.05,
            loop_sigma_theta: 0.005,
            odometry_sigma_xy: 0.03,
            odometry_sigma_theta: 0.003,
            frames: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Clouds in the registration corpus.
    pub pairs: usize,
    pub points: usize,
    /// Measurement noise added to each corpus cloud.
    pub noise_sigma: f64,
    /// Strip vertical structure so registration is ill-conditioned.
    pub planar_only: bool,
    pub max_translation: f64,
    /// Maximum rotation magnitude, radians.
    pub max_rotation: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            pairs: 20,
            points: 900,
            noise_sigma: 0.01,
            planar_only: false,
            max_translation: 2.0,
            max_rotation: 10.0_f64.to_radians(),
        }
    }
}

impl ScenarioConfig {
    /// Parses and validates a scenario file. Any schema violation fails here,
    /// before a run starts.
    pub fn load(path: &Path) -> Result<ScenarioConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses from text; `label` names the source in error messages.
    pub fn parse(text: &str, label: &str) -> Result<ScenarioConfig, ConfigError> {
        let mut cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: label.to_string(),
            // toml errors carry line and column in their Display form
            message: e.to_string(),
        })?;
        cfg.source_path = label.to_string();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.source_path;
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                p,
                "schema_version",
                format!("this build reads version {SCHEMA_VERSION}, file says {}", self.schema_version),
            ));
        }
        match self.track.kind.as_str() {
            "oval" | "road_course" => {}
            other => {
                return Err(invalid(
                    p,
                    "track.kind",
                    format!("must be \"oval\" or \"road_course\", got \"{other}\""),
                ))
            }
        }
        for (key, v) in [
            ("track.half_width", self.track.half_width),
            ("track.ds", self.track.ds),
            ("track.straight", self.track.straight),
            ("track.radius", self.track.radius),
            ("track.ramp", self.track.ramp),
            ("track.base_radius", self.track.base_radius),
        ] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(invalid(p, key, format!("must be positive, got {v}")));
                }
            }
        }
        self.run_mode()?;
        for (key, v) in [
            ("run.duration", self.run.duration),
            ("run.dt", self.run.dt),
            ("run.v_max", self.run.v_max),
            ("run.a_lat", self.run.a_lat),
            ("run.a_lon", self.run.a_lon),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(p, key, format!("must be positive, got {v}")));
            }
        }
        if self.run.duration <= self.run.dt {
            return Err(invalid(
                p,
                "run.duration",
                format!("must exceed dt {}, got {}", self.run.dt, self.run.duration),
            ));
        }
        for (i, w) in self.noise.iter().enumerate() {
            let key = format!("noise[{i}]");
            self.noise_target(i)?;
            if !(w.t_end > w.t_start) {
                return Err(invalid(
                    p,
                    &key,
                    format!("t_end {} must exceed t_start {}", w.t_end, w.t_start),
                ));
            }
            if w.sigma < 0.0 || !w.sigma.is_finite() {
                return Err(invalid(p, &key, format!("sigma must be >= 0, got {}", w.sigma)));
            }
        }
        if !(self.estimator.epsilon > 0.0 && self.estimator.epsilon < self.estimator.delta) {
            return Err(invalid(
                p,
                "estimator",
                format!(
                    "need 0 < epsilon < delta, got epsilon {} delta {}",
                    self.estimator.epsilon, self.estimator.delta
                ),
            ));
        }
        if self.estimator.queue_window < 0.0 {
            return Err(invalid(
                p,
                "estimator.queue_window",
                format!("must be >= 0, got {}", self.estimator.queue_window),
            ));
        }
        if !(0.0..=1.0).contains(&self.liv.alpha) {
            return Err(invalid(
                p,
                "liv.alpha",
                format!("must lie in [0, 1], got {}", self.liv.alpha),
            ));
        }
        self.wall_side()?;
        if self.build_map.laps < 2 {
            // validated again at build time; a config that only ever runs
            // scenarios may still carry the default here
        }
        if self.bench.pairs == 0 && self.bench.points == 0 {
            // an explicitly empty corpus is caught by the bench command
        }
        Ok(())
    }

    pub fn run_mode(&self) -> Result<RunMode, ConfigError> {
        match self.run.mode.as_str() {
            "open_loop" => Ok(RunMode::OpenLoop),
            "closed_loop" => Ok(RunMode::ClosedLoop),
            other => Err(invalid(
                &self.source_path,
                "run.mode",
                format!("must be \"open_loop\" or \"closed_loop\", got \"{other}\""),
            )),
        }
    }

    fn noise_target(&self, index: usize) -> Result<SensorTarget, ConfigError> {
        let w = &self.noise[index];
        match w.target.as_str() {
            "lidar" => Ok(SensorTarget::Lidar),
            "gyro" => Ok(SensorTarget::Gyro),
            s if s.starts_with("gps") => s[3..]
                .parse::<u8>()
                .map(SensorTarget::Gps)
                .map_err(|_| {
                    invalid(
                        &self.source_path,
                        &format!("noise[{index}].target"),
                        format!("bad GPS unit in \"{s}\""),
                    )
                }),
            other => Err(invalid(
                &self.source_path,
                &format!("noise[{index}].target"),
                format!("must be gpsN, lidar, or gyro, got \"{other}\""),
            )),
        }
    }

    pub fn wall_side(&self) -> Result<Side, ConfigError> {
        match self.wall_nav.side.as_str() {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(invalid(
                &self.source_path,
                "wall_nav.side",
                format!("must be \"left\" or \"right\", got \"{other}\""),
            )),
        }
    }

    /// Builds the track geometry this config describes.
    pub fn track_definition(&self) -> TrackDefinition {
        let t = &self.track;
        let bank = BankParams {
            max: t.bank_max.unwrap_or(BankParams::default().max),
            kappa_ref: t.bank_kappa_ref.unwrap_or(BankParams::default().kappa_ref),
        };
        let ds = t.ds.unwrap_or(0.5);
        match t.kind.as_str() {
            "oval" => {
                let base = OvalParams::default();
                oval(
                    OvalParams {
                        straight: t.straight.unwrap_or(base.straight),
                        radius: t.radius.unwrap_or(base.radius),
                        ramp: t.ramp.unwrap_or(base.ramp),
                        half_width: t.half_width.unwrap_or(base.half_width),
                    },
                    bank,
                    ds,
                )
            }
            _ => {
                let base = RoadCourseParams::default();
                road_course(
                    RoadCourseParams {
                        base_radius: t.base_radius.unwrap_or(base.base_radius),
                        half_width: t.half_width.unwrap_or(base.half_width),
                        min_corners: t.min_corners.unwrap_or(base.min_corners),
                    },
                    bank,
                    t.layout_seed.unwrap_or(7),
                    ds,
                )
            }
        }
    }

    pub fn sensor_params(&self) -> SensorParams {
        let mut sp = SensorParams::default();
        let s = &self.sensors;
        if let Some(v) = s.wheelbase {
            sp.wheelbase = v;
        }
        if let Some(v) = s.gps_divisor {
            sp.gps_divisor = v;
        }
        if let Some(v) = s.gps_units {
            sp.gps_units = v;
        }
        if let Some(v) = s.gps_sigma_xy {
            sp.gps_sigma_xy = v;
        }
        if let Some(v) = s.gps_sigma_heading {
            sp.gps_sigma_heading = v;
        }
        if s.gps_reported_sigma_xy.is_some() {
            sp.gps_reported_sigma_xy = s.gps_reported_sigma_xy;
        }
        if s.gps_reported_sigma_heading.is_some() {
            sp.gps_reported_sigma_heading = s.gps_reported_sigma_heading;
        }
        if let Some(v) = s.gyro_sigma {
            sp.gyro_sigma = v;
        }
        if let Some(v) = s.gyro_bias {
            sp.gyro_bias = v;
        }
        if let Some(v) = s.speed_sigma {
            sp.speed_sigma = v;
        }
        if let Some(v) = s.steer_sigma {
            sp.steer_sigma = v;
        }
        if let Some(v) = s.lidar_divisor {
            sp.lidar_divisor = v;
        }
        if let Some(v) = s.lidar_points {
            sp.lidar_points = v;
        }
        if let Some(v) = s.lidar_sigma {
            sp.lidar_sigma = v;
        }
        if let Some(v) = s.lidar_behind {
            sp.lidar_behind = v;
        }
        if let Some(v) = s.lidar_ahead {
            sp.lidar_ahead = v;
        }
        sp.sampling = self.surface_sampling();
        sp
    }

    pub fn surface_sampling(&self) -> SurfaceSampling {
        let mut sm = SurfaceSampling::default();
        let s = &self.sensors.sampling;
        if let Some(v) = s.wall_fraction {
            sm.wall_fraction = v;
        }
        if let Some(v) = s.wall_height {
            sm.wall_height = v;
        }
        if let Some(v) = s.wall_setback {
            sm.wall_setback = v;
        }
        if let Some(v) = s.board_fraction {
            sm.board_fraction = v;
        }
        if let Some(v) = s.board_spacing {
            sm.board_spacing = v;
        }
        if let Some(v) = s.board_width {
            sm.board_width = v;
        }
        if let Some(v) = s.board_height {
            sm.board_height = v;
        }
        if let Some(v) = s.board_setback {
            sm.board_setback = v;
        }
        sm
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        let mut schedule = NoiseSchedule::default();
        for (i, w) in self.noise.iter().enumerate() {
            let target = self.noise_target(i).expect("validated at load");
            schedule.windows.push(NoiseWindow {
                target,
                t_start: w.t_start,
                t_end: w.t_end,
                sigma: w.sigma,
                bias: Vector2::new(w.bias[0], w.bias[1]),
                dropout: w.dropout,
            });
        }
        schedule
    }

    /// Full simulator parameter set; `seed_override` wins over the file.
    pub fn sim_params(&self, seed_override: Option<u64>) -> SimParams {
        SimParams {
            seed: seed_override.unwrap_or(self.run.seed),
            duration: self.run.duration,
            dt: self.run.dt,
            start_s: self.run.start_s,
            v_max: self.run.v_max,
            a_lat: self.run.a_lat,
            a_lon: self.run.a_lon,
            sensors: self.sensor_params(),
            schedule: self.noise_schedule(),
        }
    }

    pub fn gate_thresholds(&self) -> GateThresholds {
        GateThresholds {
            epsilon: self.estimator.epsilon,
            delta: self.estimator.delta,
        }
    }

    pub fn process_noise(&self) -> ProcessNoise {
        ProcessNoise {
            diag: Vector6::from_row_slice(&self.estimator.process_noise),
        }
    }

    pub fn init_sigma(&self) -> Vector6<f64> {
        Vector6::from_row_slice(&self.estimator.init_sigma)
    }

    pub fn liv_params(&self) -> LivParams {
        LivParams {
            alpha: self.liv.alpha,
            wheelbase: self.sensor_params().wheelbase,
            ..LivParams::default()
        }
    }

    pub fn localizer_params(&self) -> LocalizerParams {
        let l = &self.localizer;
        LocalizerParams {
            registration: crate::registration::RegistrationParams {
                workers: l.workers,
                ..Default::default()
            },
            window_radius: l.window_radius,
            reliability_threshold: l.reliability_threshold,
            sigma_xy: l.sigma_xy,
            sigma_theta: l.sigma_theta,
            cost_scale: l.cost_scale,
            max_seed_speed: l.max_seed_speed,
            gps_consistency_radius: l.gps_consistency_radius,
        }
    }

    pub fn map_build_params(&self) -> MapBuildParams {
        let l = &self.localizer;
        MapBuildParams {
            bucket_length: l.bucket_length,
            points_per_bucket: l.points_per_bucket,
            leaf_size: l.leaf_size,
            k_neighbors: l.k_neighbors,
            kernel: l.kernel.clone(),
            sampling: self.surface_sampling(),
            seed: l.map_seed,
        }
    }

    pub fn wall_nav_params(&self) -> WallNavParams {
        let w = &self.wall_nav;
        WallNavParams {
            voxel_leaf: w.voxel_leaf,
            cell: w.cell,
            min_count: w.min_count,
            tolerance: w.tolerance,
            min_cluster: w.min_cluster,
            side: self.wall_side().expect("validated at load"),
            d_gap: w.d_gap,
            horizon: w.horizon,
            track_width: w.track_width,
            emergency_threshold: w.emergency_threshold,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\n\n[track]\nkind = \"oval\"\n";

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ScenarioConfig::parse(MINIMAL, "mem").unwrap();
        assert_eq!(cfg.run_mode().unwrap(), RunMode::OpenLoop);
        assert_eq!(cfg.run.duration, 60.0);
        assert_eq!(cfg.estimator.epsilon, 0.2);
        assert_eq!(cfg.estimator.delta, 5.0);
        let sim = cfg.sim_params(None);
        assert_eq!(sim.seed, 1);
        assert_eq!(sim.sensors.gps_units, 2);
        let sim2 = cfg.sim_params(Some(99));
        assert_eq!(sim2.seed, 99);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let text = format!("{MINIMAL}\n[run]\nmoed = \"open_loop\"\n");
        let err = ScenarioConfig::parse(&text, "mem").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("moed"), "names the bad key: {msg}");
        assert!(msg.contains("line"), "carries a position: {msg}");
    }

    #[test]
    fn missing_track_section_is_an_error() {
        let err = ScenarioConfig::parse("schema_version = 1\n", "mem").unwrap_err();
        assert!(err.to_string().contains("track"), "{err}");
    }

    #[test]
    fn wrong_schema_version_is_an_error() {
        let text = "schema_version = 2\n\n[track]\nkind = \"oval\"\n";
        let err = ScenarioConfig::parse(text, "mem").unwrap_err();
        assert!(err.to_string().contains("schema_version"), "{err}");
    }

    #[test]
    fn semantic_errors_name_the_key() {
        let text = format!("{MINIMAL}\n[run]\ndt = -0.01\n");
        let err = ScenarioConfig::parse(&text, "mem").unwrap_err();
        assert!(err.to_string().contains("run.dt"), "{err}");

        let text = format!("{MINIMAL}\n[[noise]]\ntarget = \"radar\"\nt_start = 0.0\nt_end = 1.0\n");
        let err = ScenarioConfig::parse(&text, "mem").unwrap_err();
        assert!(err.to_string().contains("noise[0].target"), "{err}");

        let text = format!("{MINIMAL}\n[estimator]\nepsilon = 6.0\n");
        let err = ScenarioConfig::parse(&text, "mem").unwrap_err();
        assert!(err.to_string().contains("epsilon"), "{err}");
    }

    #[test]
    fn noise_entries_map_to_schedule_windows() {
        let text = format!(
            "{MINIMAL}\n[[noise]]\ntarget = \"gps1\"\nt_start = 5.0\nt_end = 9.0\nsigma = 10.0\n\n\
             [[noise]]\ntarget = \"lidar\"\nt_start = 2.0\nt_end = 4.0\ndropout = true\n\n\
             [[noise]]\ntarget = \"gps0\"\nt_start = 1.0\nt_end = 2.0\nbias = [3.0, -1.0]\n"
        );
        let cfg = ScenarioConfig::parse(&text, "mem").unwrap();
        let schedule = cfg.noise_schedule();
        assert_eq!(schedule.windows.len(), 3);
        assert_eq!(schedule.extra_sigma(SensorTarget::Gps(1), 7.0), 10.0);
        assert!(schedule.dropped(SensorTarget::Lidar, 3.0));
        assert!(!schedule.dropped(SensorTarget::Lidar, 4.5));
        assert_eq!(schedule.bias(SensorTarget::Gps(0), 1.5), Vector2::new(3.0, -1.0));
    }

    #[test]
    fn kernel_and_track_sections_round_trip() {
        let text = "schema_version = 1\n\n[track]\nkind = \"road_course\"\nhalf_width = 7.5\nlayout_seed = 11\n\n\
                    [localizer]\nkernel = { kind = \"rbf\", sigma = 0.8 }\nworkers = 2\n";
        let cfg = ScenarioConfig::parse(text, "mem").unwrap();
        let track = cfg.track_definition();
        assert!(track.length > 600.0);
        assert_eq!(track.half_width, 7.5);
        match cfg.map_build_params().kernel {
            KernelDescriptor::Rbf { sigma } => assert_eq!(sigma, 0.8),
            other => panic!("wrong kernel: {other:?}"),
        }
        assert_eq!(cfg.localizer_params().registration.workers, 2);
    }
}
