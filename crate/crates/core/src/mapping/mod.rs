//! Pose-graph map building and multi-session frame unification.
//!
//! Nodes are planar poses; factors are pose priors, odometry constraints
//! between consecutive nodes and loop-closure constraints between lap
//! revisits. Optimization is batch Levenberg-Marquardt; the damped normal
//! equations are solved matrix-free by preconditioned conjugate gradients
//! with a block-Jacobi (per-node 3x3) preconditioner, so the solver scales
//! to tens of thousands of nodes without any sparse matrix dependency. All
//! reductions run sequentially in factor order, which keeps results
//! bit-identical from run to run.

use crate::types::{wrap_angle, Pose2};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Prior,
    Between,
    Loop,
}

/// One graph constraint. For `Prior` the factor anchors node `from` at
/// `delta` in the map frame and `to == from`; otherwise `delta` is the pose
/// of node `to` expressed in node `from`'s frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub from: usize,
    pub to: usize,
    pub delta: Pose2,
    pub information: Matrix3<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("information matrix must be symmetric positive definite")]
    NonSpdInformation,
    #[error("factor references node {index} but the graph has {len} nodes")]
    InvalidNode { index: usize, len: usize },
    #[error("graph has no prior factor to anchor the map frame")]
    Unanchored,
    #[error("graph splits into {components} disconnected components")]
    Disconnected { components: usize },
    #[error("graph is empty")]
    Empty,
    #[error("frame unification needs at least 3 pose pairs, got {0}")]
    NotEnoughCorrespondences(usize),
    #[error("frame unification inputs differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn check_spd(m: &Matrix3<f64>) -> Result<(), MapError> {
    let sym_err = (m - m.transpose()).abs().max();
    if sym_err > 1e-9 * (1.0 + m.abs().max()) || m.cholesky().is_none() {
        return Err(MapError::NonSpdInformation);
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    nodes: Vec<Pose2>,
    factors: Vec<Factor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeParams {
    pub max_iterations: usize,
    pub lambda_init: f64,
    /// Relative residual tolerance of the inner conjugate-gradient solve.
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        OptimizeParams {
            max_iterations: 50,
            lambda_init: 1e-4,
            cg_tolerance: 1e-12,
            cg_max_iterations: 1500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PoseGraph {
    pub fn new() -> Self {
        PoseGraph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Pose2] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> Pose2 {
        self.nodes[i]
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// Appends a node from an odometry increment. On an empty graph the
    /// increment is taken as the absolute starting pose and anchored with a
    /// prior carrying the same information; afterwards each call composes
    /// the last node with `relative` and adds a between factor. Returns the
    /// new node's index.
    pub fn add_odometry(
        &mut self,
        relative: Pose2,
        information: Matrix3<f64>,
    ) -> Result<usize, MapError> {
        check_spd(&information)?;
        if self.nodes.is_empty() {
            self.nodes.push(relative);
            self.factors.push(Factor {
                kind: FactorKind::Prior,
                from: 0,
                to: 0,
                delta: relative,
                information,
            });
            return Ok(0);
        }
        let prev = *self.nodes.last().unwrap();
        let idx = self.nodes.len();
        self.nodes.push(prev.compose(&relative));
        self.factors.push(Factor {
            kind: FactorKind::Between,
            from: idx - 1,
            to: idx,
            delta: relative,
            information,
        });
        Ok(idx)
    }

    pub fn add_prior(
        &mut self,
        node: usize,
        pose: Pose2,
        information: Matrix3<f64>,
    ) -> Result<(), MapError> {
        check_spd(&information)?;
        self.check_node(node)?;
        self.factors.push(Factor {
            kind: FactorKind::Prior,
            from: node,
            to: node,
            delta: pose,
            information,
        });
        Ok(())
    }

    pub fn add_loop(
        &mut self,
        from: usize,
        to: usize,
        delta: Pose2,
        information: Matrix3<f64>,
    ) -> Result<(), MapError> {
        check_spd(&information)?;
        self.check_node(from)?;
        self.check_node(to)?;
        self.factors.push(Factor {
            kind: FactorKind::Loop,
            from,
            to,
            delta,
            information,
        });
        Ok(())
    }

    fn check_node(&self, i: usize) -> Result<(), MapError> {
        if i >= self.nodes.len() {
            return Err(MapError::InvalidNode {
                index: i,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    /// Sum of squared factor residuals weighted by their information.
    pub fn cost(&self) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let r = factor_residual(f, &self.nodes);
                (r.transpose() * f.information * r)[(0, 0)]
            })
            .sum()
    }

    /// Batch Levenberg-Marquardt. Requires at least one prior (gauge anchor)
    /// and a fully connected graph.
    pub fn optimize(&mut self, params: &OptimizeParams) -> Result<OptimizeReport, MapError> {
        if self.nodes.is_empty() {
            return Err(MapError::Empty);
        }
        if !self.factors.iter().any(|f| f.kind == FactorKind::Prior) {
            return Err(MapError::Unanchored);
        }
        let components = self.count_components();
        if components != 1 {
            return Err(MapError::Disconnected { components });
        }

        let n = self.nodes.len();
        let initial_cost = self.cost();
        let mut cost = initial_cost;
        let mut lambda = params.lambda_init;
        let mut converged = false;
        let mut iterations = 0;

        for _ in 0..params.max_iterations {
            iterations += 1;
            let lin = linearize(&self.factors, &self.nodes);

            // gradient and the per-node diagonal blocks of the Hessian
            let mut grad = vec![Vector3::zeros(); n];
            let mut diag_blocks = vec![Matrix3::zeros(); n];
            for lf in &lin {
                grad[lf.a] += lf.ja.transpose() * lf.weighted_r;
                diag_blocks[lf.a] += lf.ja.transpose() * lf.info * lf.ja;
                if let Some(b) = lf.b {
                    grad[b] += lf.jb.transpose() * lf.weighted_r;
                    diag_blocks[b] += lf.jb.transpose() * lf.info * lf.jb;
                }
            }

            let grad_norm = grad.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
            if grad_norm < 1e-12 {
                converged = true;
                break;
            }

            let delta = pcg_solve(&lin, &grad, &diag_blocks, lambda, n, params);
            let step_norm = delta.iter().map(|d| d.amax()).fold(0.0, f64::max);

            // trial update
            let mut trial = self.nodes.clone();
            for (i, d) in delta.iter().enumerate() {
                trial[i] = Pose2::new(trial[i].x + d[0], trial[i].y + d[1], trial[i].theta + d[2]);
            }
            let trial_cost: f64 = self
                .factors
                .iter()
                .map(|f| {
                    let r = factor_residual(f, &trial);
                    (r.transpose() * f.information * r)[(0, 0)]
                })
                .sum();

            if trial_cost < cost {
                self.nodes = trial;
                let improvement = (cost - trial_cost) / cost.max(1e-300);
                cost = trial_cost;
                lambda = (lambda / 3.0).max(1e-12);
                if step_norm < 1e-8 || improvement < 1e-12 {
                    converged = true;
                    break;
                }
            } else {
                lambda *= 4.0;
                if lambda > 1e12 {
                    converged = true; // stuck in a damping wall, accept the state
                    break;
                }
            }
        }

        Ok(OptimizeReport {
            initial_cost,
            final_cost: cost,
            iterations,
            converged,
        })
    }

    fn count_components(&self) -> usize {
        let mut uf = UnionFind::new(self.nodes.len());
        for f in &self.factors {
            uf.union(f.from, f.to);
        }
        let mut roots: Vec<usize> = (0..self.nodes.len()).map(|i| uf.find(i)).collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    /// Plain text serialization: NODE/PRIOR/EDGE records with full float
    /// precision. Between and loop factors both serialize as EDGE lines;
    /// a non-consecutive edge reads back as a loop.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.nodes.iter().enumerate() {
            writeln!(out, "NODE {} {:.17e} {:.17e} {:.17e}", i, p.x, p.y, p.theta).unwrap();
        }
        for f in &self.factors {
            let m = &f.information;
            match f.kind {
                FactorKind::Prior => writeln!(
                    out,
                    "PRIOR {} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
                    f.from, f.delta.x, f.delta.y, f.delta.theta,
                    m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]
                )
                .unwrap(),
                FactorKind::Between | FactorKind::Loop => writeln!(
                    out,
                    "EDGE {} {} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
                    f.from, f.to, f.delta.x, f.delta.y, f.delta.theta,
                    m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]
                )
                .unwrap(),
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<PoseGraph, MapError> {
        let mut graph = PoseGraph::new();
        let bad = |line: usize, message: &str| MapError::Parse {
            line,
            message: message.to_string(),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            let parse_f = |s: &str| -> Result<f64, MapError> {
                s.parse::<f64>().map_err(|_| bad(line, "bad float"))
            };
            let parse_u = |s: &str| -> Result<usize, MapError> {
                s.parse::<usize>().map_err(|_| bad(line, "bad index"))
            };
            match fields[0] {
                "NODE" => {
                    if fields.len() != 5 {
                        return Err(bad(line, "NODE needs: id x y theta"));
                    }
                    let id = parse_u(fields[1])?;
                    if id != graph.nodes.len() {
                        return Err(bad(line, "node ids must be dense and in order"));
                    }
                    graph.nodes.push(Pose2::new(
                        parse_f(fields[2])?,
                        parse_f(fields[3])?,
                        parse_f(fields[4])?,
                    ));
                }
                "PRIOR" => {
                    if fields.len() != 11 {
                        return Err(bad(line, "PRIOR needs: id x y theta and 6 info entries"));
                    }
                    let id = parse_u(fields[1])?;
                    let pose = Pose2::new(parse_f(fields[2])?, parse_f(fields[3])?, parse_f(fields[4])?);
                    let info = info_from_upper(&[
                        parse_f(fields[5])?,
                        parse_f(fields[6])?,
                        parse_f(fields[7])?,
                        parse_f(fields[8])?,
                        parse_f(fields[9])?,
                        parse_f(fields[10])?,
                    ]);
                    graph.add_prior(id, pose, info)?;
                }
                "EDGE" => {
                    if fields.len() != 12 {
                        return Err(bad(line, "EDGE needs: from to dx dy dtheta and 6 info entries"));
                    }
                    let from = parse_u(fields[1])?;
                    let to = parse_u(fields[2])?;
                    let delta =
                        Pose2::new(parse_f(fields[3])?, parse_f(fields[4])?, parse_f(fields[5])?);
                    let info = info_from_upper(&[
                        parse_f(fields[6])?,
                        parse_f(fields[7])?,
                        parse_f(fields[8])?,
                        parse_f(fields[9])?,
                        parse_f(fields[10])?,
                        parse_f(fields[11])?,
                    ]);
                    check_spd(&info)?;
                    if from >= graph.nodes.len() || to >= graph.nodes.len() {
                        return Err(MapError::InvalidNode {
                            index: from.max(to),
                            len: graph.nodes.len(),
                        });
                    }
                    graph.factors.push(Factor {
                        kind: if to == from + 1 { FactorKind::Between } else { FactorKind::Loop },
                        from,
                        to,
                        delta,
                        information: info,
                    });
                }
                other => {
                    return Err(bad(line, &format!("unknown record '{other}'")));
                }
            }
        }
        Ok(graph)
    }
}

fn info_from_upper(u: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(u[0], u[1], u[2], u[1], u[3], u[4], u[2], u[4], u[5])
}

/// Residual of one factor at the given node estimates, predicted minus
/// measured with the angle wrapped.
fn factor_residual(f: &Factor, nodes: &[Pose2]) -> Vector3<f64> {
    match f.kind {
        FactorKind::Prior => {
            let p = nodes[f.from];
            Vector3::new(
                p.x - f.delta.x,
                p.y - f.delta.y,
                wrap_angle(p.theta - f.delta.theta),
            )
        }
        FactorKind::Between | FactorKind::Loop => {
            let pred = nodes[f.from].between(&nodes[f.to]);
            Vector3::new(
                pred.x - f.delta.x,
                pred.y - f.delta.y,
                wrap_angle(pred.theta - f.delta.theta),
            )
        }
    }
}

/// One linearized factor: residual and Jacobian blocks at the current
/// estimate. `b` is None for priors.
struct LinFactor {
    a: usize,
    b: Option<usize>,
    ja: Matrix3<f64>,
    jb: Matrix3<f64>,
    info: Matrix3<f64>,
    weighted_r: Vector3<f64>,
}

fn linearize(factors: &[Factor], nodes: &[Pose2]) -> Vec<LinFactor> {
    factors
        .iter()
        .map(|f| {
            let r = factor_residual(f, nodes);
            match f.kind {
                FactorKind::Prior => LinFactor {
                    a: f.from,
                    b: None,
                    ja: Matrix3::identity(),
                    jb: Matrix3::zeros(),
                    info: f.information,
                    weighted_r: f.information * r,
                },
                FactorKind::Between | FactorKind::Loop => {
                    let pa = nodes[f.from];
                    let pb = nodes[f.to];
                    let (s, c) = pa.theta.sin_cos();
                    let dx = pb.x - pa.x;
                    let dy = pb.y - pa.y;
                    // residual xy = R(theta_a)^T (p_b - p_a) - measured
                    let mut ja = Matrix3::zeros();
                    ja[(0, 0)] = -c;
                    ja[(0, 1)] = -s;
                    ja[(1, 0)] = s;
                    ja[(1, 1)] = -c;
                    ja[(0, 2)] = -s * dx + c * dy;
                    ja[(1, 2)] = -c * dx - s * dy;
                    ja[(2, 2)] = -1.0;
                    let mut jb = Matrix3::zeros();
                    jb[(0, 0)] = c;
                    jb[(0, 1)] = s;
                    jb[(1, 0)] = -s;
                    jb[(1, 1)] = c;
                    jb[(2, 2)] = 1.0;
                    LinFactor {
                        a: f.from,
                        b: Some(f.to),
                        ja,
                        jb,
                        info: f.information,
                        weighted_r: f.information * r,
                    }
                }
            }
        })
        .collect()
}

/// Matrix-free product (H + lambda diag(H)) v accumulated factor by factor
/// in a fixed order.
fn hessian_product(
    lin: &[LinFactor],
    diag: &[Vector3<f64>],
    lambda: f64,
    v: &[Vector3<f64>],
    out: &mut [Vector3<f64>],
) {
    for o in out.iter_mut() {
        *o = Vector3::zeros();
    }
    for lf in lin {
        let va = v[lf.a];
        let jv = if let Some(b) = lf.b {
            lf.ja * va + lf.jb * v[b]
        } else {
            lf.ja * va
        };
        let w = lf.info * jv;
        out[lf.a] += lf.ja.transpose() * w;
        if let Some(b) = lf.b {
            out[b] += lf.jb.transpose() * w;
        }
    }
    for (o, (vi, di)) in out.iter_mut().zip(v.iter().zip(diag.iter())) {
        o.x += lambda * di.x * vi.x;
        o.y += lambda * di.y * vi.y;
        o.z += lambda * di.z * vi.z;
    }
}

/// Preconditioned conjugate gradients on the damped normal equations,
/// block-Jacobi preconditioner. Solves (H + lambda diag(H)) delta = -grad.
fn pcg_solve(
    lin: &[LinFactor],
    grad: &[Vector3<f64>],
    diag_blocks: &[Matrix3<f64>],
    lambda: f64,
    n: usize,
    params: &OptimizeParams,
) -> Vec<Vector3<f64>> {
    let diag: Vec<Vector3<f64>> = diag_blocks.iter().map(|b| b.diagonal()).collect();
    let precond: Vec<Matrix3<f64>> = diag_blocks
        .iter()
        .zip(diag.iter())
        .map(|(b, d)| {
            let mut m = *b;
            m[(0, 0)] += lambda * d.x;
            m[(1, 1)] += lambda * d.y;
            m[(2, 2)] += lambda * d.z;
            m.try_inverse().unwrap_or_else(Matrix3::identity)
        })
        .collect();

    let mut x = vec![Vector3::zeros(); n];
    let mut r: Vec<Vector3<f64>> = grad.iter().map(|g| -g).collect();
    let rhs_norm2: f64 = r.iter().map(|v| v.norm_squared()).sum();
    if rhs_norm2 == 0.0 {
        return x;
    }
    let mut z: Vec<Vector3<f64>> = r.iter().zip(precond.iter()).map(|(ri, m)| m * ri).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(z.iter()).map(|(a, b)| a.dot(b)).sum();
    let mut hp = vec![Vector3::zeros(); n];

    let max_iter = params.cg_max_iterations.max(8).min(3 * n + 8);
    for _ in 0..max_iter {
        hessian_product(lin, &diag, lambda, &p, &mut hp);
        let php: f64 = p.iter().zip(hp.iter()).map(|(a, b)| a.dot(b)).sum();
        if php <= 0.0 {
            break; // numerical breakdown, return the best iterate so far
        }
        let alpha = rz / php;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        let r_norm2: f64 = r.iter().map(|v| v.norm_squared()).sum();
        if r_norm2 <= params.cg_tolerance * params.cg_tolerance * rhs_norm2 {
            break;
        }
        for i in 0..n {
            z[i] = precond[i] * r[i];
        }
        let rz_new: f64 = r.iter().zip(z.iter()).map(|(a, b)| a.dot(b)).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

/// Disjoint-set over node indices.
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Assigns graph nodes to fixed-length arc buckets of a reference
/// centerline, so nodes from different laps that share a bucket become loop
/// candidates.
#[derive(Debug, Clone)]
pub struct RacetrackIndex {
    pub bucket_length: f64,
    pub node_s: Vec<f64>,
    buckets: BTreeMap<i64, Vec<usize>>,
}

impl RacetrackIndex {
    pub fn build(track: &crate::sim::TrackDefinition, nodes: &[Pose2], bucket_length: f64) -> Self {
        assert!(bucket_length > 0.0);
        let mut buckets: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        let mut node_s = Vec::with_capacity(nodes.len());
        let mut hint = None;
        for (i, p) in nodes.iter().enumerate() {
            let proj = track.project(p.x, p.y, hint);
            hint = Some(proj.index);
            node_s.push(proj.s);
            buckets
                .entry((proj.s / bucket_length).floor() as i64)
                .or_default()
                .push(i);
        }
        RacetrackIndex {
            bucket_length,
            node_s,
            buckets,
        }
    }

    pub fn bucket_of(&self, node: usize) -> i64 {
        (self.node_s[node] / self.bucket_length).floor() as i64
    }

    pub fn buckets(&self) -> impl Iterator<Item = (&i64, &Vec<usize>)> {
        self.buckets.iter()
    }
}

/// Proposes the relative pose and information for one loop candidate pair,
/// or None to veto it.
pub trait LoopMatcher {
    fn match_pair(&mut self, from: usize, to: usize) -> Option<(Pose2, Matrix3<f64>)>;
}

/// Matches loop pairs from externally measured poses (for instance raw GPS
/// fixes recorded per node). The proposed delta is the between of the two
/// reference poses; pairs whose reference positions are farther apart than
/// `max_distance` are vetoed.
pub struct PoseLoopMatcher {
    pub reference: Vec<Pose2>,
    pub max_distance: f64,
    pub information: Matrix3<f64>,
}

impl LoopMatcher for PoseLoopMatcher {
    fn match_pair(&mut self, from: usize, to: usize) -> Option<(Pose2, Matrix3<f64>)> {
        let a = self.reference.get(from)?;
        let b = self.reference.get(to)?;
        if a.position_distance(b) > self.max_distance {
            return None;
        }
        Some((a.between(b), self.information))
    }
}

/// Scans the index for same-bucket node pairs at least `min_gap` indices
/// apart (different laps) and asks the matcher for a constraint. Each node
/// closes at most one loop, against its earliest co-bucket predecessor.
pub fn detect_loops(
    index: &RacetrackIndex,
    min_gap: usize,
    matcher: &mut dyn LoopMatcher,
) -> Vec<Factor> {
    let mut out = Vec::new();
    for (_, members) in index.buckets() {
        for (pos, &j) in members.iter().enumerate() {
            let partner = members[..pos].iter().find(|&&i| j - i >= min_gap);
            if let Some(&i) = partner {
                if let Some((delta, information)) = matcher.match_pair(i, j) {
                    out.push(Factor {
                        kind: FactorKind::Loop,
                        from: i,
                        to: j,
                        delta,
                        information,
                    });
                }
            }
        }
    }
    out
}

/// Closed-form rigid alignment of two equal-length pose sequences recorded
/// in different map frames: returns the transform T that best maps the
/// positions of `from` onto `to` in the least-squares sense (Kabsch on the
/// 2D cross-covariance).
pub fn unify_frames(from: &[Pose2], to: &[Pose2]) -> Result<Pose2, MapError> {
    if from.len() != to.len() {
        return Err(MapError::LengthMismatch {
            a: from.len(),
            b: to.len(),
        });
    }
    if from.len() < 3 {
        return Err(MapError::NotEnoughCorrespondences(from.len()));
    }
    let n = from.len() as f64;
    let mut mu_a = Vector2::zeros();
    let mut mu_b = Vector2::zeros();
    for (a, b) in from.iter().zip(to.iter()) {
        mu_a += Vector2::new(a.x, a.y);
        mu_b += Vector2::new(b.x, b.y);
    }
    mu_a /= n;
    mu_b /= n;

    let mut cross = Matrix2::zeros();
    for (a, b) in from.iter().zip(to.iter()) {
        let da = Vector2::new(a.x, a.y) - mu_a;
        let db = Vector2::new(b.x, b.y) - mu_b;
        cross += db * da.transpose();
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let mut d = Matrix2::identity();
    if (u * vt).determinant() < 0.0 {
        d[(1, 1)] = -1.0;
    }
    let r = u * d * vt;
    let theta = r[(1, 0)].atan2(r[(0, 0)]);
    let t = mu_b - r * mu_a;
    Ok(Pose2::new(t.x, t.y, theta))
}
