//! Scenario configs, the runs they describe, and the files those runs emit.

pub mod config;
pub mod outputs;
pub mod pipeline;

pub use config::{ConfigError, RunMode, ScenarioConfig, SCHEMA_VERSION};
pub use outputs::{write_all, write_bench};
pub use pipeline::{
    bench_registration, build_map_run, read_frames, replay_scenario, run_scenario, write_frames,
    BenchRow, BuildMapSummary, DiagRow, EstimateRow, RunArtifacts, ScanRecord, ScenarioError,
    WallRecord,
};
