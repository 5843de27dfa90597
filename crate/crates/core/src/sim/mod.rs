//! Deterministic synthetic track and sensor simulation.

pub mod sensors;
pub mod track;

pub use sensors::{
    sample_surface_points, simulate_scripted, synthesize_scan, ClosedLoopSim, DriveCommand,
    SurfaceSampling,
    GpsFix, ImuSample,
    LidarScan, NoiseSchedule, NoiseWindow, PointLabel, SensorParams, SensorTarget, SimFrame,
    SimParams, TruthState, VehicleSample,
};
pub use track::{
    count_corners, oval, road_course, BankParams, CenterlineSample, OvalParams,
    RoadCourseParams, SpeedProfile, TrackDefinition, TrackProjection,
};
