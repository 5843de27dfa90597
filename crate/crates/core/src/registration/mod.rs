//! Distribution-to-distribution scan registration.
//!
//! Clouds carry one anisotropic Gaussian per point. Covariances come from a
//! kernel-weighted scatter of the voxel neighborhood, flattened onto the
//! local surface (eigenvalues regularized to 1, 1, epsilon). Registration
//! runs Gauss-Newton on SE(3) over gated nearest-neighbor pairs, minimizing
//! the compound-covariance Mahalanobis cost
//!
//!   sum_i d_i^T (C_i^target + R C_i^source R^T)^-1 d_i,
//!   d_i = q_i - T p_i.
//!
//! Every pass that could run on multiple workers computes per-index results
//! into a preallocated buffer and reduces sequentially in index order, so the
//! output is bit-identical for any worker count.

pub mod io;
pub mod kernel;
pub mod voxel;

pub use kernel::{kernel_eval, KernelDescriptor, KernelError};
pub use voxel::{voxel_downsample, VoxelIndex};

use crate::types::{rotvec_to_matrix, skew, Frame, Point3, RigidTransform3};
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Eigenvalue assigned along the estimated surface normal; the two in-plane
/// directions get 1. Keeps every covariance invertible with condition 1/eps.
pub const PLANE_REGULARIZATION: f64 = 1e-3;

/// Point cloud where each point is a Gaussian (mean + 3x3 covariance).
#[derive(Debug, Clone)]
pub struct GaussianCloud {
    pub means: Vec<Point3>,
    pub covariances: Vec<Matrix3<f64>>,
    pub frame: Frame,
    pub leaf_size: f64,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("cloud is empty")]
    EmptyCloud,
    #[error("only {found} gated correspondences, need at least {needed}")]
    NotEnoughCorrespondences { found: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy)]
pub struct RegistrationParams {
    pub max_iterations: usize,
    /// Convergence threshold on the SE(3) update norm.
    pub update_epsilon: f64,
    /// Correspondences farther than `scale * target.leaf_size` are dropped.
    pub correspondence_scale: f64,
    /// Floor on gated correspondences; values below 6 are treated as 6.
    pub min_correspondences: usize,
    pub workers: usize,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        RegistrationParams {
            max_iterations: 50,
            update_epsilon: 1e-6,
            correspondence_scale: 3.0,
            min_correspondences: 6,
            workers: 1,
        }
    }
}

impl RegistrationParams {
    fn validate(&self) -> Result<(), RegistrationError> {
        if self.max_iterations == 0 {
            return Err(RegistrationError::InvalidParameter(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.update_epsilon > 0.0) {
            return Err(RegistrationError::InvalidParameter(
                "update_epsilon must be positive".into(),
            ));
        }
        if !(self.correspondence_scale > 0.0) {
            return Err(RegistrationError::InvalidParameter(
                "correspondence_scale must be positive".into(),
            ));
        }
        if self.workers == 0 {
            return Err(RegistrationError::InvalidParameter(
                "workers must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Maps source-frame points into the target frame.
    pub transform: RigidTransform3,
    /// Mean gated residual cost at the returned transform.
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Gated correspondences over source size, at the final iteration.
    pub inlier_fraction: f64,
    /// Accepted mean cost after each iteration, for diagnostics.
    pub cost_trace: Vec<f64>,
}

/// Runs `f` for every index in `0..n`, possibly on several workers, and
/// returns the results in index order. Partitioning never changes results:
/// each element depends only on its own index.
fn par_map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let mut parts: Vec<Vec<T>> = Vec::with_capacity(workers);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(n);
            let f = &f;
            handles.push(scope.spawn(move || (lo..hi).map(f).collect::<Vec<T>>()));
        }
        for h in handles {
            parts.push(h.join().expect("registration worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p);
    }
    out
}

/// Estimates a per-point covariance for every input point from its k nearest
/// neighbors (within one voxel cell in every direction), weighted by
/// `kernel`, then regularizes each scatter onto the local surface.
///
/// Requires `k_neighbors >= 5` and at least `k_neighbors` points. Isolated
/// points and degenerate neighborhoods fall back to an isotropic
/// `PLANE_REGULARIZATION`-scaled covariance.
pub fn estimate_covariances(
    points: &[Point3],
    frame: Frame,
    leaf_size: f64,
    k_neighbors: usize,
    kernel: &KernelDescriptor,
    workers: usize,
) -> Result<GaussianCloud, RegistrationError> {
    if points.is_empty() {
        return Err(RegistrationError::EmptyCloud);
    }
    if k_neighbors < 5 {
        return Err(RegistrationError::InvalidParameter(format!(
            "k_neighbors must be at least 5, got {k_neighbors}"
        )));
    }
    if points.len() < k_neighbors {
        return Err(RegistrationError::InvalidParameter(format!(
            "need at least k_neighbors={k_neighbors} points, got {}",
            points.len()
        )));
    }
    if !(leaf_size > 0.0) {
        return Err(RegistrationError::InvalidParameter(
            "leaf_size must be positive".into(),
        ));
    }
    kernel.validate()?;

    let index = VoxelIndex::build(points, leaf_size);
    let per_point = par_map_indexed(points.len(), workers, |i| {
        point_covariance(points, &index, i, k_neighbors, kernel)
    });

    let mut covariances = Vec::with_capacity(points.len());
    for c in per_point {
        covariances.push(c?);
    }
    Ok(GaussianCloud {
        means: points.to_vec(),
        covariances,
        frame,
        leaf_size,
    })
}

fn point_covariance(
    points: &[Point3],
    index: &VoxelIndex,
    i: usize,
    k: usize,
    kernel: &KernelDescriptor,
) -> Result<Matrix3<f64>, RegistrationError> {
    let p = points[i];
    let neighbors = index.k_nearest(points, &p, k);

    let mut weights = Vec::with_capacity(neighbors.len());
    let mut sum_w = 0.0;
    for &(j, _) in &neighbors {
        let w = kernel_eval(kernel, &p, &points[j as usize])?;
        weights.push(w);
        sum_w += w;
    }
    // kernel mass can underflow for far-flung neighborhoods; fall back to a
    // plain unweighted scatter rather than dividing by ~0
    if !(sum_w > 1e-300) || !sum_w.is_finite() {
        weights.iter_mut().for_each(|w| *w = 1.0);
        sum_w = weights.len() as f64;
    }

    let mut mu = Vector3::zeros();
    for (&(j, _), &w) in neighbors.iter().zip(&weights) {
        mu += w * points[j as usize].coords;
    }
    mu /= sum_w;

    let mut scatter = Matrix3::zeros();
    for (&(j, _), &w) in neighbors.iter().zip(&weights) {
        let d = points[j as usize].coords - mu;
        scatter += w * d * d.transpose();
    }
    scatter /= sum_w;

    Ok(regularize_scatter(&scatter))
}

/// Replaces the scatter's eigenvalues with (1, 1, eps), eps along the
/// direction of least spread. A near-zero scatter becomes eps * I.
pub fn regularize_scatter(scatter: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = nalgebra::SymmetricEigen::new(*scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let largest = eig.eigenvalues[order[2]];
    if largest < 1e-12 {
        return Matrix3::identity() * PLANE_REGULARIZATION;
    }
    let mut c = Matrix3::zeros();
    for (rank, &idx) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(idx);
        let lambda = if rank == 0 { PLANE_REGULARIZATION } else { 1.0 };
        c += lambda * v * v.transpose();
    }
    c
}

struct Correspondence {
    src: u32,
    tgt: u32,
    /// Inverse compound covariance at the iteration's rotation.
    weight: Matrix3<f64>,
}

/// Registers `source` onto `target`, starting from `guess`. The result maps
/// source-frame coordinates into the target frame.
pub fn register(
    source: &GaussianCloud,
    target: &GaussianCloud,
    guess: &RigidTransform3,
    params: &RegistrationParams,
) -> Result<RegistrationResult, RegistrationError> {
    params.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(RegistrationError::EmptyCloud);
    }
    let min_corr = params.min_correspondences.max(6);
    let gate = params.correspondence_scale * target.leaf_size;
    let gate2 = gate * gate;
    let index = VoxelIndex::build(&target.means, gate.max(target.leaf_size));

    let mut t = *guess;
    let mut converged = false;
    let mut iterations = 0;
    let mut cost_trace = Vec::new();
    let mut last_cost = f64::INFINITY;
    let mut last_inliers = 0usize;

    for _ in 0..params.max_iterations {
        iterations += 1;
        let rot = t.rotation;

        let matches: Vec<Option<Correspondence>> =
            par_map_indexed(source.len(), params.workers, |i| {
                let p = t.transform_point(&source.means[i]);
                let (j, d2) = index.nearest_one(&target.means, &p)?;
                if d2 > gate2 {
                    return None;
                }
                let compound = target.covariances[j as usize]
                    + rot * source.covariances[i] * rot.transpose();
                compound.try_inverse().map(|weight| Correspondence {
                    src: i as u32,
                    tgt: j,
                    weight,
                })
            });

        // sequential reduction in source-index order keeps this bit-stable
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let mut cost = 0.0;
        let mut n = 0usize;
        for c in matches.iter().flatten() {
            let y = t.transform_point(&source.means[c.src as usize]).coords;
            let d = target.means[c.tgt as usize].coords - y;
            // d(residual)/d(translation) = -I, d(residual)/d(rotation) = [y]x
            let jr = skew(Vector3::from(y));
            let md = c.weight * d;
            cost += d.dot(&md);
            n += 1;

            // J = [-I | [y]x], accumulate J^T M J and J^T M d blockwise
            let m = c.weight;
            let mjr = m * jr;
            let jrt_m_jr = jr.transpose() * mjr;
            for r in 0..3 {
                for col in 0..3 {
                    h[(r, col)] += m[(r, col)];
                    h[(r, col + 3)] -= mjr[(r, col)];
                    h[(r + 3, col)] -= mjr[(col, r)];
                    h[(r + 3, col + 3)] += jrt_m_jr[(r, col)];
                }
                g[r] -= md[r];
                g[r + 3] += jr.column(r).dot(&md);
            }
        }

        if n < min_corr {
            return Err(RegistrationError::NotEnoughCorrespondences {
                found: n,
                needed: min_corr,
            });
        }
        let cost = cost / n as f64;
        last_inliers = n;

        let mut delta = solve_spd6(&h, &-g).ok_or_else(|| {
            RegistrationError::InvalidParameter("normal equations became singular".into())
        })?;

        // halve the step until the cost stops increasing on this
        // correspondence set; a fully stalled step ends the iteration loop
        let mut stepped = false;
        for _ in 0..12 {
            let candidate = apply_update(&t, &delta);
            let new_cost = eval_cost(source, target, &matches, &candidate);
            if new_cost <= cost || delta.norm() < params.update_epsilon {
                t = candidate;
                t.renormalize();
                cost_trace.push(new_cost);
                last_cost = new_cost;
                stepped = true;
                break;
            }
            delta *= 0.5;
        }
        if !stepped {
            last_cost = cost;
            cost_trace.push(cost);
            break;
        }
        if delta.norm() < params.update_epsilon {
            converged = true;
            break;
        }
    }

    Ok(RegistrationResult {
        transform: t,
        final_cost: last_cost,
        iterations,
        converged,
        inlier_fraction: last_inliers as f64 / source.len() as f64,
        cost_trace,
    })
}

fn eval_cost(
    source: &GaussianCloud,
    target: &GaussianCloud,
    matches: &[Option<Correspondence>],
    t: &RigidTransform3,
) -> f64 {
    let mut cost = 0.0;
    let mut n = 0usize;
    for c in matches.iter().flatten() {
        let d = target.means[c.tgt as usize].coords
            - t.transform_point(&source.means[c.src as usize]).coords;
        cost += d.dot(&(c.weight * d));
        n += 1;
    }
    if n == 0 {
        f64::INFINITY
    } else {
        cost / n as f64
    }
}

/// Left-multiplicative update: delta = [translation; rotation vector].
fn apply_update(t: &RigidTransform3, delta: &Vector6<f64>) -> RigidTransform3 {
    let rho = Vector3::new(delta[0], delta[1], delta[2]);
    let phi = Vector3::new(delta[3], delta[4], delta[5]);
    let dr = rotvec_to_matrix(phi);
    RigidTransform3 {
        rotation: dr * t.rotation,
        translation: dr * t.translation + rho,
    }
}

fn solve_spd6(h: &Matrix6<f64>, rhs: &Vector6<f64>) -> Option<Vector6<f64>> {
    if let Some(chol) = h.cholesky() {
        return Some(chol.solve(rhs));
    }
    // tiny ridge for numerically semi-definite systems
    let ridge = (h.trace().abs() / 6.0).max(1e-12) * 1e-9;
    (h + Matrix6::identity() * ridge)
        .cholesky()
        .map(|c| c.solve(rhs))
}
