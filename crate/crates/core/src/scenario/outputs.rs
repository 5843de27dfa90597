//! File writers for scenario artifacts. Every CSV is written with fixed
//! nine-digit formatting so two runs of the same config produce identical
//! bytes; `metrics.txt` carries wall-clock CPU numbers and is exempt.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::scenario::pipeline::{BenchRow, RunArtifacts, ScenarioError};

fn create(path: &Path) -> Result<BufWriter<std::fs::File>, ScenarioError> {
    let file = std::fs::File::create(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(BufWriter::new(file))
}

fn finish(w: &mut BufWriter<std::fs::File>, path: &Path) -> Result<(), ScenarioError> {
    w.flush().map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

macro_rules! out {
    ($w:expr, $path:expr, $($arg:tt)*) => {
        writeln!($w, $($arg)*).map_err(|e| ScenarioError::Io {
            path: $path.display().to_string(),
            source: e,
        })?
    };
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.9}"))
}

/// Writes every artifact of one run into `out_dir`, creating it if needed.
/// Returns the paths written.
pub fn write_all(run: &RunArtifacts, out_dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    std::fs::create_dir_all(out_dir).map_err(|e| ScenarioError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut written = Vec::new();

    let path = out_dir.join("truth.csv");
    let mut w = create(&path)?;
    out!(w, path, "t,x,y,theta");
    for (t, p) in &run.truth {
        out!(w, path, "{:.9},{:.9},{:.9},{:.9}", t.0, p.x, p.y, p.theta);
    }
    finish(&mut w, &path)?;
    written.push(path);

    let path = out_dir.join("estimate.csv");
    let mut w = create(&path)?;
    out!(w, path, "t,x,y,theta,source_decision");
    for r in &run.estimate {
        out!(
            w,
            path,
            "{:.9},{:.9},{:.9},{:.9},{}",
            r.t,
            r.pose.x,
            r.pose.y,
            r.pose.theta,
            r.decision
        );
    }
    finish(&mut w, &path)?;
    written.push(path);

    // truth and estimate share the tick grid, so the error series is an
    // exact row-by-row difference
    let path = out_dir.join("error.csv");
    let mut w = create(&path)?;
    out!(w, path, "t,error");
    for ((t, truth), est) in run.truth.iter().zip(run.estimate.iter()) {
        debug_assert_eq!(t.0, est.t);
        out!(w, path, "{:.9},{:.9}", t.0, truth.position_distance(&est.pose));
    }
    finish(&mut w, &path)?;
    written.push(path);

    let path = out_dir.join("diagnostics.csv");
    let mut w = create(&path)?;
    out!(
        w,
        path,
        "t,kind,source_id,delta,decision,lambda,engaged,d_wall,d_gap,reason"
    );
    for d in &run.diagnostics {
        out!(
            w,
            path,
            "{:.9},{},{},{},{},{},{},{},{},{}",
            d.t,
            d.kind,
            d.source_id.map_or(String::new(), |s| s.to_string()),
            opt(d.delta),
            d.decision,
            opt(d.lambda),
            d.engaged.map_or(String::new(), |e| (e as u8).to_string()),
            opt(d.d_wall),
            opt(d.d_gap),
            d.reason
        );
    }
    for wrec in &run.walls {
        out!(
            w,
            path,
            "{:.9},wall,,,{},,{},{},{},{}",
            wrec.t,
            if wrec.engaged { "engaged" } else { "nominal" },
            u8::from(wrec.engaged),
            opt(wrec.d_wall),
            opt(wrec.wheel_wall),
            wrec.reason
        );
    }
    finish(&mut w, &path)?;
    written.push(path);

    let path = out_dir.join("metrics.txt");
    std::fs::write(&path, crate::metrics::report_txt(&run.report)).map_err(|e| {
        ScenarioError::Io {
            path: path.display().to_string(),
            source: e,
        }
    })?;
    written.push(path);

    if let Some(frames) = &run.frames {
        let path = out_dir.join("frames.jsonl");
        crate::scenario::pipeline::write_frames(frames, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes the kernel benchmark table as CSV.
pub fn write_bench(rows: &[BenchRow], path: &Path) -> Result<(), ScenarioError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| ScenarioError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    let mut w = create(path)?;
    out!(w, path, "kernel,rmse,mean,median,std,converged,pairs");
    for r in rows {
        out!(
            w,
            path,
            "{},{:.9},{:.9},{:.9},{:.9},{},{}",
            r.kernel,
            r.rmse,
            r.mean,
            r.median,
            r.std,
            r.converged,
            r.pairs
        );
    }
    finish(&mut w, path)
}
