//! Wall-relative fallback navigation from raw LiDAR.
//!
//! When every localization source degrades at once the vehicle still has to
//! stay off the walls. This module turns a single body-frame scan into a
//! drivable path: a vote grid drops the road surface without fitting any
//! plane, Euclidean clustering groups the remaining vertical features, the
//! longest cluster on the chosen side is fit with a quadratic, and the
//! fallback path holds a fixed gap from that wall.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::mapping::UnionFind;
use crate::types::Point3;

#[derive(Debug, Error)]
pub enum WallNavError {
    #[error("no cluster on the {side:?} side to fit a wall against")]
    NoWall { side: Side },
    #[error("gap {d_gap} m would put the path past the far wall ({track_width} m across)")]
    PathCrossesTrack { d_gap: f64, track_width: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Which wall the follower keys on. Right is the default: on a closed
/// circuit driven counterclockwise the outer wall is continuously on the
/// right through every corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Side {
    Left,
    #[default]
    Right,
}

impl Side {
    /// Sign of the wall's lateral coordinate in the body frame.
    pub fn sign(&self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }
}

/// Tunables for the scan-to-path pipeline, including when to engage it.
#[derive(Debug, Clone)]
pub struct WallNavParams {
    /// Voxel leaf applied to the raw scan before voting; must be <= `cell`.
    pub voxel_leaf: f64,
    /// Vote grid cell size in the x-y plane.
    pub cell: f64,
    /// Cells with fewer votes than this are treated as road surface.
    pub min_count: usize,
    /// Euclidean clustering connection distance.
    pub tolerance: f64,
    /// Clusters smaller than this are noise.
    pub min_cluster: usize,
    pub side: Side,
    /// Desired lateral gap between path and wall.
    pub d_gap: f64,
    /// Forward extent of the generated path.
    pub horizon: f64,
    /// Wall-to-wall track width used to reject gaps that cross the track.
    pub track_width: f64,
    /// Wheel-to-wall distance that forces an engagement regardless of the
    /// gate streak.
    pub emergency_threshold: f64,
}

impl Default for WallNavParams {
    fn default() -> Self {
        WallNavParams {
            voxel_leaf: 0.2,
            cell: 0.5,
            min_count: 5,
            tolerance: 1.0,
            min_cluster: 10,
            side: Side::Right,
            d_gap: 2.0,
            horizon: 50.0,
            track_width: 21.4,
            emergency_threshold: 0.5,
        }
    }
}

/// Sparse 2D occupancy counter over x-y cells. Each cell stores the indices
/// of the points that voted for it, so the count always equals the stored
/// list length and only non-empty cells exist.
#[derive(Debug, Clone)]
pub struct VoteGrid {
    pub cell: f64,
    cells: HashMap<(i64, i64), Vec<u32>>,
}

impl VoteGrid {
    pub fn build(points: &[Point3], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells
                .entry(Self::key(cell, p))
                .or_default()
                .push(i as u32);
        }
        VoteGrid { cell, cells }
    }

    fn key(cell: f64, p: &Point3) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    pub fn cell_of(&self, p: &Point3) -> (i64, i64) {
        Self::key(self.cell, p)
    }

    pub fn count(&self, key: (i64, i64)) -> usize {
        self.cells.get(&key).map_or(0, Vec::len)
    }

    pub fn indices(&self, key: (i64, i64)) -> &[u32] {
        self.cells.get(&key).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Indices of the input points whose vote cell collects at least
/// `min_count` votes. Vertical structure stacks many points into one x-y
/// cell; the road surface, banked or not, spreads thin and is dropped
/// without any plane fit. Input should already be voxel-filtered with a
/// leaf no larger than `cell`, so counts measure vertical extent rather
/// than raw density.
pub fn filter_ground_indices(points: &[Point3], cell: f64, min_count: usize) -> Vec<usize> {
    let grid = VoteGrid::build(points, cell);
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| grid.count(grid.cell_of(p)) >= min_count)
        .map(|(i, _)| i)
        .collect()
}

/// [`filter_ground_indices`] materialized to points.
pub fn filter_ground(points: &[Point3], cell: f64, min_count: usize) -> Vec<Point3> {
    filter_ground_indices(points, cell, min_count)
        .into_iter()
        .map(|i| points[i])
        .collect()
}

/// One Euclidean cluster: indices into the input slice and the points
/// themselves, both in input order.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub indices: Vec<usize>,
    pub points: Vec<Point3>,
}

impl Cluster {
    /// Spread along the body x axis, the length measure used to pick the
    /// wall cluster.
    pub fn x_extent(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in &self.points {
            lo = lo.min(p.x);
            hi = hi.max(p.x);
        }
        if lo > hi {
            0.0
        } else {
            hi - lo
        }
    }

    pub fn centroid_y(&self) -> f64 {
        self.points.iter().map(|p| p.y).sum::<f64>() / self.points.len().max(1) as f64
    }
}

/// Connected components of the points under the `tolerance` Euclidean
/// metric, largest first (ties broken by smallest member index). Components
/// below `min_size` are dropped. Neighbor search runs on a voxel hash of
/// `tolerance`-sized cells, so only the 27 surrounding cells are scanned
/// per point.
pub fn cluster(points: &[Point3], tolerance: f64, min_size: usize) -> Vec<Cluster> {
    assert!(tolerance > 0.0, "tolerance must be positive");
    if points.is_empty() {
        return Vec::new();
    }
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    let keyf = |p: &Point3| {
        (
            (p.x / tolerance).floor() as i64,
            (p.y / tolerance).floor() as i64,
            (p.z / tolerance).floor() as i64,
        )
    };
    for (i, p) in points.iter().enumerate() {
        grid.entry(keyf(p)).or_default().push(i as u32);
    }

    let tol2 = tolerance * tolerance;
    let mut uf = UnionFind::new(points.len());
    for (i, p) in points.iter().enumerate() {
        let (cx, cy, cz) = keyf(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(cands) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &j in cands {
                        let j = j as usize;
                        if j <= i {
                            continue;
                        }
                        if (points[j] - p).norm_squared() <= tol2 {
                            uf.union(i, j);
                        }
                    }
                }
            }
        }
    }

    // group by root in index order so members stay sorted
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..points.len() {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    let mut clusters: Vec<Cluster> = groups
        .into_values()
        .filter(|g| g.len() >= min_size)
        .map(|indices| {
            let points = indices.iter().map(|&i| points[i]).collect();
            Cluster { indices, points }
        })
        .collect();
    clusters.sort_by_key(|c| (std::cmp::Reverse(c.indices.len()), c.indices[0]));
    clusters
}

/// Quadratic wall fit in the body frame.
#[derive(Debug, Clone)]
pub struct WallModel {
    /// Coefficients of y(x) = beta[0] + beta[1] x + beta[2] x^2.
    pub beta: Vector3<f64>,
    /// The z-projected cluster the fit used.
    pub wall_points: Vec<(f64, f64)>,
    /// Lateral wall position at x = 0; always equals beta[0].
    pub d_wall: f64,
    pub side: Side,
}

impl WallModel {
    pub fn lateral_at(&self, x: f64) -> f64 {
        self.beta[0] + self.beta[1] * x + self.beta[2] * x * x
    }

    /// Gap between the vehicle body edge and the wall at x = 0.
    pub fn clearance(&self, half_vehicle_width: f64) -> f64 {
        self.side.sign() * self.d_wall - half_vehicle_width
    }
}

/// Fits the wall on the requested side: among the clusters whose centroid
/// lies on that side of the body x axis, the one with the largest x extent
/// is projected to the x-y plane and fit with a degree-2 least squares
/// polynomial. Clusters of fewer than 10 points cannot anchor a wall.
pub fn extract_wall(clusters: &[Cluster], side: Side) -> Result<WallModel, WallNavError> {
    let best = clusters
        .iter()
        .filter(|c| c.indices.len() >= 10 && c.centroid_y() * side.sign() > 0.0)
        .max_by(|a, b| a.x_extent().total_cmp(&b.x_extent()))
        .ok_or(WallNavError::NoWall { side })?;

    let n = best.points.len();
    let mut design = DMatrix::zeros(n, 3);
    let mut rhs = DVector::zeros(n);
    let mut wall_points = Vec::with_capacity(n);
    for (r, p) in best.points.iter().enumerate() {
        design[(r, 0)] = 1.0;
        design[(r, 1)] = p.x;
        design[(r, 2)] = p.x * p.x;
        rhs[r] = p.y;
        wall_points.push((p.x, p.y));
    }
    let beta = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| WallNavError::InvalidParameter(format!("wall fit failed: {e}")))?;
    let beta = Vector3::new(beta[0], beta[1], beta[2]);

    Ok(WallModel {
        beta,
        wall_points,
        d_wall: beta[0],
        side,
    })
}

/// Path holding `d_gap` from the fitted wall, sampled forward at 1 m.
#[derive(Debug, Clone)]
pub struct FallbackPath {
    /// Body-frame (x, y) samples, x = 0, 1, ... up to the horizon.
    pub points: Vec<(f64, f64)>,
    pub d_gap: f64,
}

/// Shifts the wall polynomial laterally by `d_gap` toward the track center
/// and samples it at 1 m spacing over `[0, horizon]`. The curvature terms
/// carry over unchanged; only the constant becomes `d_wall` minus the
/// signed gap. `track_width` guards against a gap so large the path would
/// sit past the opposite wall.
pub fn make_path(
    w: &WallModel,
    d_gap: f64,
    horizon: f64,
    track_width: f64,
) -> Result<FallbackPath, WallNavError> {
    if !(d_gap > 0.0) {
        return Err(WallNavError::InvalidParameter("d_gap must be positive".into()));
    }
    if !(horizon > 0.0) {
        return Err(WallNavError::InvalidParameter("horizon must be positive".into()));
    }
    if d_gap >= track_width {
        return Err(WallNavError::PathCrossesTrack { d_gap, track_width });
    }

    let offset = w.d_wall - w.side.sign() * d_gap;
    let mut points = Vec::new();
    let mut x = 0.0;
    while x <= horizon + 1e-9 {
        points.push((x, offset + w.beta[1] * x + w.beta[2] * x * x));
        x += 1.0;
    }
    Ok(FallbackPath { points, d_gap })
}

/// Consecutive fully-rejected gate decisions that trip the fallback.
pub const REJECT_STREAK_ENGAGE: u32 = 3;

/// The fallback engages after `REJECT_STREAK_ENGAGE` consecutive rejections
/// of every localization source, or immediately when a wheel is about to
/// touch the wall.
pub fn engage(reject_streak: u32, wheel_wall_distance: f64, emergency_threshold: f64) -> bool {
    reject_streak >= REJECT_STREAK_ENGAGE || wheel_wall_distance < emergency_threshold
}
