//! Voxel hash index over point sets.
//!
//! Cells are cubes of edge `cell`; a point maps to the cell containing it
//! under floor quantization. Neighbor queries look at the 3x3x3 block of
//! cells around the query point, which bounds the search radius to one cell
//! in every direction. All tie-breaking is by point index so query results
//! do not depend on hash iteration order or thread count.

use crate::types::Point3;
use std::collections::HashMap;

pub type CellKey = (i64, i64, i64);

#[derive(Debug, Clone)]
pub struct VoxelIndex {
    cell: f64,
    cells: HashMap<CellKey, Vec<u32>>,
}

pub fn cell_of(p: &Point3, cell: f64) -> CellKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

impl VoxelIndex {
    /// Indexes `points` with the given cell edge. Insertion order within a
    /// cell follows point index, so lookups are reproducible.
    pub fn build(points: &[Point3], cell: f64) -> Self {
        assert!(cell > 0.0, "voxel cell edge must be positive");
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p, cell)).or_default().push(i as u32);
        }
        VoxelIndex { cell, cells }
    }

    pub fn cell_edge(&self) -> f64 {
        self.cell
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }

    /// Visits every candidate index in the 27-cell block around `q` in a
    /// fixed order (cell offsets lexicographic, then insertion order).
    pub fn for_each_candidate(&self, q: &Point3, mut f: impl FnMut(u32)) {
        let (cx, cy, cz) = cell_of(q, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in ids {
                            f(i);
                        }
                    }
                }
            }
        }
    }

    /// Nearest indexed point to `q` within the 27-cell block, with its
    /// squared distance. Ties break toward the lower index.
    pub fn nearest_one(&self, points: &[Point3], q: &Point3) -> Option<(u32, f64)> {
        let mut best: Option<(u32, f64)> = None;
        self.for_each_candidate(q, |i| {
            let d2 = (points[i as usize] - q).norm_squared();
            match best {
                None => best = Some((i, d2)),
                Some((bi, bd2)) => {
                    if d2 < bd2 || (d2 == bd2 && i < bi) {
                        best = Some((i, d2));
                    }
                }
            }
        });
        best
    }

    /// Up to `k` nearest indexed points to `q` within the 27-cell block,
    /// ascending by (squared distance, index). Returns fewer than `k` when
    /// the neighborhood is sparse.
    pub fn k_nearest(&self, points: &[Point3], q: &Point3, k: usize) -> Vec<(u32, f64)> {
        let mut cand: Vec<(u32, f64)> = Vec::with_capacity(k * 4);
        self.for_each_candidate(q, |i| {
            cand.push((i, (points[i as usize] - q).norm_squared()));
        });
        cand.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        cand.truncate(k);
        cand
    }
}

/// Keeps the first point encountered in each voxel cell, in first-occurrence
/// order. Returns the surviving points plus their indices into the input so
/// callers can carry per-point metadata through the filter.
pub fn voxel_downsample(points: &[Point3], leaf: f64) -> (Vec<Point3>, Vec<usize>) {
    assert!(leaf > 0.0, "voxel leaf must be positive");
    let mut seen: HashMap<CellKey, ()> = HashMap::with_capacity(points.len());
    let mut out = Vec::new();
    let mut kept = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if seen.insert(cell_of(p, leaf), ()).is_none() {
            out.push(*p);
            kept.push(i);
        }
    }
    (out, kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points(n: i64, spacing: f64) -> Vec<Point3> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Point3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
            }
        }
        pts
    }

    #[test]
    fn nearest_one_finds_exact_match() {
        let pts = grid_points(5, 1.0);
        let idx = VoxelIndex::build(&pts, 1.0);
        let (i, d2) = idx.nearest_one(&pts, &Point3::new(2.0, 3.0, 0.0)).unwrap();
        assert_eq!(pts[i as usize], Point3::new(2.0, 3.0, 0.0));
        assert_eq!(d2, 0.0);
    }

    #[test]
    fn k_nearest_matches_brute_force_within_one_cell_radius() {
        let pts = grid_points(6, 0.4);
        let cell = 1.0;
        let idx = VoxelIndex::build(&pts, cell);
        let q = Point3::new(1.03, 0.77, 0.0);
        let got = idx.k_nearest(&pts, &q, 8);

        let mut brute: Vec<(u32, f64)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u32, (p - q).norm_squared()))
            // restrict brute force to the same 27-cell reach
            .filter(|(i, _)| {
                let (cx, cy, cz) = cell_of(&q, cell);
                let (px, py, pz) = cell_of(&pts[*i as usize], cell);
                (px - cx).abs() <= 1 && (py - cy).abs() <= 1 && (pz - cz).abs() <= 1
            })
            .collect();
        brute.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        brute.truncate(8);
        assert_eq!(got, brute);
    }

    #[test]
    fn k_nearest_returns_short_list_in_sparse_regions() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.1, 0.0, 0.0)];
        let idx = VoxelIndex::build(&pts, 0.5);
        let got = idx.k_nearest(&pts, &Point3::new(0.05, 0.0, 0.0), 10);
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn negative_coordinates_quantize_consistently() {
        // floor quantization must not collapse -0.1 and +0.1 into one cell
        assert_ne!(
            cell_of(&Point3::new(-0.1, 0.0, 0.0), 1.0),
            cell_of(&Point3::new(0.1, 0.0, 0.0), 1.0)
        );
    }

    #[test]
    fn downsample_keeps_one_point_per_cell_and_reports_indices() {
        let pts = vec![
            Point3::new(0.05, 0.05, 0.0),
            Point3::new(0.08, 0.02, 0.0), // same cell as first
            Point3::new(0.95, 0.05, 0.0),
        ];
        let (out, kept) = voxel_downsample(&pts, 0.5);
        assert_eq!(out.len(), 2);
        assert_eq!(kept, vec![0, 2]);
    }
}
