//! Trajectory error statistics and process resource sampling.
//!
//! Position errors of an estimated trajectory are measured against ground
//! truth linearly interpolated to the estimate timestamps, then aggregated
//! whole-run and per fixed-length time slice. CPU utilization comes from the
//! operating system's own accounting; where no usable counters exist the
//! report says "n/a" rather than inventing numbers. Reports render as
//! key=value text and as a single CSV row.

use crate::types::{Pose2, Timestamp};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty {0} trajectory")]
    Empty(&'static str),
    #[error(
        "no temporal overlap: estimate covers {est_start:.3}..{est_end:.3}s, \
         truth covers {truth_start:.3}..{truth_end:.3}s"
    )]
    NoOverlap {
        est_start: f64,
        est_end: f64,
        truth_start: f64,
        truth_end: f64,
    },
    #[error("interval length must be positive and finite, got {0}")]
    InvalidInterval(f64),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Aggregate over a set of position errors, all in meters. `std` is the
/// population deviation, so rmse^2 = mean^2 + std^2 up to rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub samples: usize,
}

impl ErrorStats {
    /// Sorts internally; input order never matters.
    fn from_errors(mut errors: Vec<f64>) -> ErrorStats {
        assert!(!errors.is_empty(), "caller guarantees at least one error");
        errors.sort_by(f64::total_cmp);
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let mean_sq = errors.iter().map(|e| e * e).sum::<f64>() / n;
        let rmse = mean_sq.sqrt();
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        let mid = errors.len() / 2;
        let median = if errors.len() % 2 == 0 {
            0.5 * (errors[mid - 1] + errors[mid])
        } else {
            errors[mid]
        };
        ErrorStats {
            rmse,
            mean,
            median,
            std: var.sqrt(),
            samples: errors.len(),
        }
    }
}

/// Error statistics over one time slice of the run. Boundaries are nominal
/// (anchor + k * interval); slices containing no estimate samples are
/// omitted from the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub start: f64,
    pub end: f64,
    pub error: ErrorStats,
}

/// CPU utilization aggregate in percent of total machine capacity, so one
/// saturated core on an n-core machine reads near 100/n.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpuStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub samples: usize,
}

impl CpuStats {
    pub fn from_samples(samples: &[f64]) -> Option<CpuStats> {
        if samples.is_empty() {
            return None;
        }
        let mut max = f64::NEG_INFINITY;
        let mut min = f64::INFINITY;
        let mut sum = 0.0;
        for &s in samples {
            max = max.max(s);
            min = min.min(s);
            sum += s;
        }
        Some(CpuStats {
            mean: sum / samples.len() as f64,
            max,
            min,
            samples: samples.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Whole-run position error statistics.
    pub error: ErrorStats,
    /// CPU aggregate; None when sampling was off or unavailable.
    pub cpu: Option<CpuStats>,
    /// Per-slice breakdown in time order.
    pub intervals: Vec<IntervalStats>,
}

pub const DEFAULT_INTERVAL_SECONDS: f64 = 10.0;

/// Position error of `estimate` against linearly interpolated `truth`, with
/// the default per-interval breakdown.
pub fn trajectory_error(
    estimate: &[(Timestamp, Pose2)],
    truth: &[(Timestamp, Pose2)],
) -> Result<MetricsReport, MetricsError> {
    trajectory_error_with_interval(estimate, truth, DEFAULT_INTERVAL_SECONDS)
}

/// Same with an explicit slice length. Estimate samples outside the truth
/// time range are dropped rather than extrapolated; the time ranges must
/// overlap in at least one sample.
pub fn trajectory_error_with_interval(
    estimate: &[(Timestamp, Pose2)],
    truth: &[(Timestamp, Pose2)],
    interval: f64,
) -> Result<MetricsReport, MetricsError> {
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(MetricsError::InvalidInterval(interval));
    }
    if estimate.is_empty() {
        return Err(MetricsError::Empty("estimate"));
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty("truth"));
    }

    let mut est: Vec<(f64, Pose2)> = estimate.iter().map(|(t, p)| (t.0, *p)).collect();
    est.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut tru: Vec<(f64, Pose2)> = truth.iter().map(|(t, p)| (t.0, *p)).collect();
    tru.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (t_lo, t_hi) = (tru[0].0, tru[tru.len() - 1].0);
    let mut timed_errors: Vec<(f64, f64)> = Vec::with_capacity(est.len());
    for &(t, pose) in &est {
        if t < t_lo || t > t_hi {
            continue;
        }
        let (x, y) = interp_xy(&tru, t);
        timed_errors.push((t, ((pose.x - x).powi(2) + (pose.y - y).powi(2)).sqrt()));
    }
    if timed_errors.is_empty() {
        return Err(MetricsError::NoOverlap {
            est_start: est[0].0,
            est_end: est[est.len() - 1].0,
            truth_start: t_lo,
            truth_end: t_hi,
        });
    }

    let anchor = timed_errors[0].0;
    let mut slices: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for &(t, e) in &timed_errors {
        let idx = ((t - anchor) / interval).floor().max(0.0) as u64;
        slices.entry(idx).or_default().push(e);
    }
    let intervals = slices
        .into_iter()
        .map(|(idx, errors)| IntervalStats {
            start: anchor + idx as f64 * interval,
            end: anchor + (idx + 1) as f64 * interval,
            error: ErrorStats::from_errors(errors),
        })
        .collect();

    Ok(MetricsReport {
        error: ErrorStats::from_errors(timed_errors.into_iter().map(|(_, e)| e).collect()),
        cpu: None,
        intervals,
    })
}

/// Truth position at time t. `truth` is sorted and t lies inside its range;
/// a sample exactly at a truth timestamp returns that point untouched, so
/// no interpolation noise enters aligned comparisons.
fn interp_xy(truth: &[(f64, Pose2)], t: f64) -> (f64, f64) {
    let i = truth.partition_point(|(tt, _)| *tt <= t);
    if i == 0 {
        return (truth[0].1.x, truth[0].1.y);
    }
    let (ta, pa) = truth[i - 1];
    if i == truth.len() || ta == t {
        return (pa.x, pa.y);
    }
    let (tb, pb) = truth[i];
    let dt = tb - ta;
    if dt <= 0.0 {
        return (pa.x, pa.y);
    }
    let a = (t - ta) / dt;
    (pa.x + a * (pb.x - pa.x), pa.y + a * (pb.y - pa.y))
}

/// Accumulated CPU time of this process in seconds, from the kernel's own
/// accounting (/proc). None wherever that interface is missing.
fn process_cpu_seconds() -> Option<f64> {
    // /proc/<pid>/stat: utime and stime are fields 14 and 15 in USER_HZ
    // ticks; the command field may contain spaces so parse after its
    // closing parenthesis. The /proc tick unit is fixed at 100 Hz.
    const USER_HZ: f64 = 100.0;
    let text = std::fs::read_to_string("/proc/self/stat").ok()?;
    let rest = text.rsplit_once(')')?.1;
    let mut fields = rest.split_whitespace();
    let utime: f64 = fields.nth(11)?.parse().ok()?;
    let stime: f64 = fields.next()?.parse().ok()?;
    Some((utime + stime) / USER_HZ)
}

/// Incremental utilization sampler. Each call reports the mean utilization
/// since the previous call, in percent of total machine capacity; the first
/// call only establishes the baseline.
#[derive(Debug, Default)]
pub struct CpuSampler {
    prev: Option<(Instant, f64)>,
}

impl CpuSampler {
    pub fn new() -> CpuSampler {
        CpuSampler::default()
    }

    pub fn sample(&mut self) -> Option<f64> {
        let cpu = process_cpu_seconds()?;
        let now = Instant::now();
        let out = self.prev.and_then(|(pt, pc)| {
            let wall = now.duration_since(pt).as_secs_f64();
            if wall <= 0.0 {
                return None;
            }
            let cores = std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1) as f64;
            Some(100.0 * (cpu - pc).max(0.0) / (wall * cores))
        });
        self.prev = Some((now, cpu));
        out
    }
}

/// Background sampler on a fixed period (1 Hz by default in the pipeline).
/// Stopping returns the aggregate, or None when the platform never yielded
/// a sample.
pub struct ResourceMonitor {
    stop: std::sync::Arc<std::sync::atomic::AtomicBool>,
    handle: Option<std::thread::JoinHandle<Vec<f64>>>,
}

impl ResourceMonitor {
    pub fn start(period: Duration) -> ResourceMonitor {
        let stop = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            let mut sampler = CpuSampler::new();
            sampler.sample();
            let mut out = Vec::new();
            while !flag.load(std::sync::atomic::Ordering::Relaxed) {
                // sleep in short slices so stop() returns promptly
                let wake = Instant::now() + period;
                while Instant::now() < wake {
                    if flag.load(std::sync::atomic::Ordering::Relaxed) {
                        return out;
                    }
                    std::thread::sleep(Duration::from_millis(10).min(period));
                }
                if let Some(pct) = sampler.sample() {
                    out.push(pct);
                }
            }
            out
        });
        ResourceMonitor {
            stop,
            handle: Some(handle),
        }
    }

    pub fn stop(mut self) -> Option<CpuStats> {
        self.stop.store(true, std::sync::atomic::Ordering::Relaxed);
        let samples = self
            .handle
            .take()
            .and_then(|h| h.join().ok())
            .unwrap_or_default();
        CpuStats::from_samples(&samples)
    }
}

impl Drop for ResourceMonitor {
    fn drop(&mut self) {
        self.stop.store(true, std::sync::atomic::Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "n/a".to_string(),
    }
}

/// key=value rendering, one line per figure, intervals enumerated.
pub fn report_txt(report: &MetricsReport) -> String {
    let e = &report.error;
    let mut s = String::new();
    s.push_str(&format!("samples={}\n", e.samples));
    s.push_str(&format!("rmse={:.6}\n", e.rmse));
    s.push_str(&format!("mean={:.6}\n", e.mean));
    s.push_str(&format!("median={:.6}\n", e.median));
    s.push_str(&format!("std={:.6}\n", e.std));
    s.push_str(&format!("cpu_mean={}\n", fmt_opt(report.cpu.map(|c| c.mean))));
    s.push_str(&format!("cpu_max={}\n", fmt_opt(report.cpu.map(|c| c.max))));
    s.push_str(&format!("cpu_min={}\n", fmt_opt(report.cpu.map(|c| c.min))));
    s.push_str(&format!(
        "cpu_samples={}\n",
        report.cpu.map(|c| c.samples).unwrap_or(0)
    ));
    s.push_str(&format!("interval_count={}\n", report.intervals.len()));
    for (i, iv) in report.intervals.iter().enumerate() {
        s.push_str(&format!("interval_{i}_start={:.6}\n", iv.start));
        s.push_str(&format!("interval_{i}_end={:.6}\n", iv.end));
        s.push_str(&format!("interval_{i}_rmse={:.6}\n", iv.error.rmse));
        s.push_str(&format!("interval_{i}_mean={:.6}\n", iv.error.mean));
        s.push_str(&format!("interval_{i}_median={:.6}\n", iv.error.median));
        s.push_str(&format!("interval_{i}_std={:.6}\n", iv.error.std));
        s.push_str(&format!("interval_{i}_samples={}\n", iv.error.samples));
    }
    s
}

/// Header plus one row in the reporting table's column order.
pub fn report_csv(report: &MetricsReport) -> String {
    let e = &report.error;
    format!(
        "rmse,mean,median,std,cpu_mean,cpu_max,cpu_min\n{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
        e.rmse,
        e.mean,
        e.median,
        e.std,
        fmt_opt(report.cpu.map(|c| c.mean)),
        fmt_opt(report.cpu.map(|c| c.max)),
        fmt_opt(report.cpu.map(|c| c.min)),
    )
}

pub fn write_report_txt(report: &MetricsReport, path: &Path) -> Result<(), MetricsError> {
    std::fs::write(path, report_txt(report)).map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_report_csv(report: &MetricsReport, path: &Path) -> Result<(), MetricsError> {
    std::fs::write(path, report_csv(report)).map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
