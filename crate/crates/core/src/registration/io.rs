//! On-disk point cloud format.
//!
//! Binary little-endian: point count as u64, then x, y, z as f32 per point.
//! A text sidecar at `<path>.meta` records the frame tag and voxel leaf size
//! so a cloud can be rebuilt into a `GaussianCloud` without guessing its
//! resolution. Covariances are never persisted; they are re-estimated after
//! load.

use crate::types::{Frame, Point3};
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: file truncated (expected {expected} points, read {read})")]
    Truncated {
        path: PathBuf,
        expected: u64,
        read: usize,
    },
    #[error("{path}: malformed sidecar header: {detail}")]
    BadHeader { path: PathBuf, detail: String },
}

fn io_err(path: &Path, source: io::Error) -> CloudIoError {
    CloudIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta");
    PathBuf::from(os)
}

/// Writes points plus the sidecar header. Coordinates are narrowed to f32.
pub fn write_points(
    path: &Path,
    points: &[Point3],
    frame: Frame,
    leaf_size: f64,
) -> Result<(), CloudIoError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&(points.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    for p in points {
        for c in [p.x as f32, p.y as f32, p.z as f32] {
            w.write_all(&c.to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;

    let meta = meta_path(path);
    fs::write(&meta, format!("frame={frame}\nleaf_size={leaf_size}\n"))
        .map_err(|e| io_err(&meta, e))?;
    Ok(())
}

/// Reads points and the sidecar header back.
pub fn read_points(path: &Path) -> Result<(Vec<Point3>, Frame, f64), CloudIoError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut count_buf = [0u8; 8];
    r.read_exact(&mut count_buf).map_err(|e| io_err(path, e))?;
    let count = u64::from_le_bytes(count_buf);

    let mut points = Vec::with_capacity(count as usize);
    let mut rec = [0u8; 12];
    for _ in 0..count {
        if let Err(e) = r.read_exact(&mut rec) {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                return Err(CloudIoError::Truncated {
                    path: path.to_path_buf(),
                    expected: count,
                    read: points.len(),
                });
            }
            return Err(io_err(path, e));
        }
        let x = f32::from_le_bytes(rec[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(rec[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(rec[8..12].try_into().unwrap());
        points.push(Point3::new(x as f64, y as f64, z as f64));
    }

    let meta = meta_path(path);
    let text = fs::read_to_string(&meta).map_err(|e| io_err(&meta, e))?;
    let mut frame = None;
    let mut leaf = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some(("frame", v)) => {
                frame = Some(v.parse::<Frame>().map_err(|e| CloudIoError::BadHeader {
                    path: meta.clone(),
                    detail: e,
                })?)
            }
            Some(("leaf_size", v)) => {
                leaf = Some(v.parse::<f64>().map_err(|e| CloudIoError::BadHeader {
                    path: meta.clone(),
                    detail: format!("leaf_size: {e}"),
                })?)
            }
            _ => {
                return Err(CloudIoError::BadHeader {
                    path: meta,
                    detail: format!("unrecognized line: {line}"),
                })
            }
        }
    }
    let frame = frame.ok_or_else(|| CloudIoError::BadHeader {
        path: meta.clone(),
        detail: "missing frame".into(),
    })?;
    let leaf = leaf.ok_or_else(|| CloudIoError::BadHeader {
        path: meta.clone(),
        detail: "missing leaf_size".into(),
    })?;
    Ok((points, frame, leaf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_points_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        let pts = vec![
            Point3::new(1.25, -3.5, 0.125),
            Point3::new(1e4, -1e4, 42.0),
            Point3::new(0.1, 0.2, 0.3),
        ];
        write_points(&path, &pts, Frame::Map, 0.4).unwrap();
        let (back, frame, leaf) = read_points(&path).unwrap();
        assert_eq!(frame, Frame::Map);
        assert_eq!(leaf, 0.4);
        assert_eq!(back.len(), pts.len());
        for (a, b) in pts.iter().zip(&back) {
            // exact for values representable in f32
            assert!((a.x - b.x).abs() <= (a.x as f32).abs() as f64 * 1e-7 + 1e-7);
            assert!((a.y - b.y).abs() <= (a.y as f32).abs() as f64 * 1e-7 + 1e-7);
            assert!((a.z - b.z).abs() <= (a.z as f32).abs() as f64 * 1e-7 + 1e-7);
        }
        // dyadic values survive exactly
        assert_eq!(back[0].x, 1.25);
        assert_eq!(back[0].y, -3.5);
        assert_eq!(back[0].z, 0.125);
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        let pts = vec![Point3::new(1.0, 2.0, 3.0); 10];
        write_points(&path, &pts, Frame::Body, 1.0).unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 6]).unwrap();
        let err = read_points(&path).unwrap_err();
        assert!(matches!(err, CloudIoError::Truncated { read: 9, .. }));
    }

    #[test]
    fn missing_sidecar_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        write_points(&path, &[Point3::new(0.0, 0.0, 0.0)], Frame::Body, 1.0).unwrap();
        fs::remove_file(meta_path(&path)).unwrap();
        assert!(read_points(&path).is_err());
    }

    #[test]
    fn empty_cloud_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        write_points(&path, &[], Frame::Sensor, 0.2).unwrap();
        let (back, frame, _) = read_points(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(frame, Frame::Sensor);
    }
}
