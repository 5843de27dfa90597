//! Map-relative LiDAR localization.
//!
//! The track map is a ring of fixed-length arc buckets, each holding a
//! Gaussian cloud of the local walls and road surface plus the centerline
//! reference pose at its center. A scan is matched against the merged
//! clouds of the buckets around the current position; the match is scored
//! by a reliability in [0, 1] (inlier fraction, zeroed when the solver did
//! not converge or failed outright) and either accepted, re-seeded from
//! GPS, or bridged by dead reckoning.

use crate::liv::PreintegratedDelta;
use crate::registration::{
    self, estimate_covariances, io as cloud_io, register, GaussianCloud, KernelDescriptor,
    RegistrationParams, RegistrationResult,
};
use crate::sim::{sample_surface_points, SurfaceSampling, TrackDefinition};
use crate::types::{Frame, Point3, Pose2, RigidTransform3};
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// One map segment: the local surface cloud and the centerline pose at the
/// bucket center.
#[derive(Debug, Clone)]
pub struct MapBucket {
    pub cloud: GaussianCloud,
    pub reference: Pose2,
}

/// Ring of arc-length buckets covering one closed track.
#[derive(Debug, Clone)]
pub struct TrackMap {
    pub bucket_length: f64,
    pub half_width: f64,
    pub track_length: f64,
    buckets: BTreeMap<i64, MapBucket>,
}

#[derive(Debug, Error)]
pub enum LocalizerError {
    #[error("track map holds no buckets")]
    EmptyMap,
    #[error("pose is {lateral:.2} m from the mapped centerline, beyond twice the half width {half_width:.2}")]
    OffTrack { lateral: f64, half_width: f64 },
    #[error("no seed pose available: neither a previous fix nor GPS")]
    NoSeed,
    #[error(transparent)]
    Cloud(#[from] registration::RegistrationError),
    #[error(transparent)]
    Io(#[from] cloud_io::CloudIoError),
    #[error("map metadata error at line {line}: {message}")]
    Meta { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Dir {
        path: String,
        source: std::io::Error,
    },
}

impl TrackMap {
    pub fn new(bucket_length: f64, half_width: f64, track_length: f64) -> Self {
        assert!(bucket_length > 0.0 && track_length > bucket_length);
        TrackMap {
            bucket_length,
            half_width,
            track_length,
            buckets: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: i64, bucket: MapBucket) {
        self.buckets.insert(key, bucket);
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn bucket(&self, key: i64) -> Option<&MapBucket> {
        self.buckets.get(&key)
    }

    pub fn keys(&self) -> impl Iterator<Item = i64> + '_ {
        self.buckets.keys().copied()
    }

    fn key_of(&self, s: f64) -> i64 {
        (s.rem_euclid(self.track_length) / self.bucket_length).floor() as i64
    }

    fn center_of(&self, key: i64) -> f64 {
        (key as f64 + 0.5) * self.bucket_length
    }

    /// Buckets whose centers lie within `radius` of the center of the
    /// bucket containing `s`, by circular arc distance around the ring (a
    /// radius of one bucket length selects exactly three buckets).
    pub fn query_window(&self, s: f64, radius: f64) -> Vec<(i64, &MapBucket)> {
        let anchor = self.center_of(self.key_of(s));
        self.buckets
            .iter()
            .filter(|(k, _)| {
                let d = (self.center_of(**k) - anchor).rem_euclid(self.track_length);
                d.min(self.track_length - d) <= radius + 1e-9
            })
            .map(|(k, b)| (*k, b))
            .collect()
    }

    /// Nearest bucket reference and the signed lateral offset of (x, y) in
    /// that reference's frame.
    fn nearest_reference(&self, x: f64, y: f64) -> Option<(i64, f64)> {
        let mut best: Option<(i64, f64, f64)> = None;
        for (k, b) in &self.buckets {
            let d = (b.reference.x - x).powi(2) + (b.reference.y - y).powi(2);
            if best.map_or(true, |(_, bd, _)| d < bd) {
                let (sin_h, cos_h) = b.reference.theta.sin_cos();
                let lateral = -(x - b.reference.x) * sin_h + (y - b.reference.y) * cos_h;
                best = Some((*k, d, lateral));
            }
        }
        best.map(|(k, _, lateral)| (k, lateral))
    }
}

#[derive(Debug, Clone)]
pub struct LocalizerParams {
    pub registration: RegistrationParams,
    /// Arc radius of map buckets merged into the registration target.
    pub window_radius: f64,
    /// Matches scoring below this reliability are not trusted.
    pub reliability_threshold: f64,
    /// Base standard deviations of an accepted fix.
    pub sigma_xy: f64,
    pub sigma_theta: f64,
    /// Mean per-point cost at which the covariance doubles.
    pub cost_scale: f64,
    /// Odometry seeds implying more than this speed are discarded.
    pub max_seed_speed: f64,
    /// A match farther than this from a trusted GPS pose is treated as
    /// aliased, however well it scored: repetitive trackside structure can
    /// lock a whole scan onto the wrong stretch of wall with high inlier
    /// fractions, and only an independent position can expose that.
    pub gps_consistency_radius: f64,
}

impl Default for LocalizerParams {
    fn default() -> Self {
        LocalizerParams {
            registration: RegistrationParams::default(),
            window_radius: 45.0,
            reliability_threshold: 0.5,
            sigma_xy: 0.05,
            sigma_theta: 0.01,
            cost_scale: 0.5,
            max_seed_speed: 120.0,
            gps_consistency_radius: 4.0,
        }
    }
}

/// One localization attempt.
#[derive(Debug, Clone)]
pub struct LocalizeResult {
    pub transform: RigidTransform3,
    pub pose: Pose2,
    /// Inlier fraction gated by convergence; 0 when registration failed.
    pub reliability: f64,
    /// Reported pose covariance, inflated with the final matching cost.
    pub covariance: Matrix3<f64>,
    pub registration: Option<RegistrationResult>,
}

/// Matches a body-frame scan cloud against the map around `guess`.
/// Registration failures (too few correspondences and similar) come back as
/// a zero-reliability result rather than an error; errors are reserved for
/// unusable inputs such as an empty map or a guess far off the track.
pub fn localize(
    map: &TrackMap,
    scan: &GaussianCloud,
    guess: &RigidTransform3,
    params: &LocalizerParams,
) -> Result<LocalizeResult, LocalizerError> {
    if map.is_empty() {
        return Err(LocalizerError::EmptyMap);
    }
    let guess_pose = guess.to_pose2();
    let (key, lateral) = map
        .nearest_reference(guess_pose.x, guess_pose.y)
        .expect("non-empty map");
    if lateral.abs() > 2.0 * map.half_width {
        return Err(LocalizerError::OffTrack {
            lateral,
            half_width: map.half_width,
        });
    }

    // merge the window buckets into one registration target
    let s_anchor = map.center_of(key);
    let window = map.query_window(s_anchor, params.window_radius);
    let mut means = Vec::new();
    let mut covariances = Vec::new();
    let mut leaf = 0.0f64;
    for (_, b) in &window {
        means.extend_from_slice(&b.cloud.means);
        covariances.extend_from_slice(&b.cloud.covariances);
        leaf = leaf.max(b.cloud.leaf_size);
    }
    let target = GaussianCloud {
        means,
        covariances,
        frame: Frame::Map,
        leaf_size: leaf,
    };

    match register(scan, &target, guess, &params.registration) {
        Ok(reg) => {
            let reliability = if reg.converged { reg.inlier_fraction } else { 0.0 };
            let per_point = reg.final_cost / scan.len().max(1) as f64;
            let inflate = 1.0 + per_point / params.cost_scale;
            let covariance = Matrix3::from_diagonal(&Vector3::new(
                params.sigma_xy * params.sigma_xy * inflate,
                params.sigma_xy * params.sigma_xy * inflate,
                params.sigma_theta * params.sigma_theta * inflate,
            ));
            Ok(LocalizeResult {
                transform: reg.transform,
                pose: reg.transform.to_pose2(),
                reliability,
                covariance,
                registration: Some(reg),
            })
        }
        Err(err) => {
            log::debug!("scan registration failed: {err}");
            Ok(LocalizeResult {
                transform: *guess,
                pose: guess_pose,
                reliability: 0.0,
                covariance: Matrix3::from_diagonal(&Vector3::repeat(f64::INFINITY)),
                registration: None,
            })
        }
    }
}

/// How the localizer arrived at the pose it published.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixSource {
    /// Scan match seeded by odometry was accepted.
    ScanMatch,
    /// Odometry seed failed, the GPS re-seeded match was accepted.
    GpsReseeded,
    /// No acceptable match; pose is the odometry-propagated previous fix.
    DeadReckoned,
}

#[derive(Debug, Clone)]
pub struct LocalizerFix {
    pub source: FixSource,
    pub result: LocalizeResult,
}

/// Stateful wrapper that keeps the last accepted transform, seeds each scan
/// with pre-integrated odometry, falls back to the GPS pose when the match
/// degrades, and dead reckons when both fail.
pub struct ScanLocalizer {
    pub map: TrackMap,
    pub params: LocalizerParams,
    current: Option<RigidTransform3>,
}

impl ScanLocalizer {
    pub fn new(map: TrackMap, params: LocalizerParams) -> Self {
        ScanLocalizer {
            map,
            params,
            current: None,
        }
    }

    pub fn current(&self) -> Option<&RigidTransform3> {
        self.current.as_ref()
    }

    pub fn reset(&mut self, transform: RigidTransform3) {
        self.current = Some(transform);
    }

    /// Processes one scan. `gps_pose` is the most recent trusted GPS pose
    /// (if any), `liv_delta` the motion pre-integrated since the previous
    /// scan. A match is accepted only when it scores reliably AND lands
    /// within the consistency radius of the trusted GPS pose when one is
    /// given; a well-scoring match far from trusted GPS is an alias. Never
    /// fails outright while a seed exists: the worst outcome is a
    /// dead-reckoned fix with zero reliability.
    pub fn check_and_recover(
        &mut self,
        scan: &GaussianCloud,
        gps_pose: Option<Pose2>,
        liv_delta: Option<&PreintegratedDelta>,
    ) -> Result<LocalizerFix, LocalizerError> {
        // A pre-integrated step implying an impossible speed is corrupt; the
        // previous pose unmoved is then the better seed.
        let delta_ok = liv_delta.map_or(false, |d| {
            d.span > 0.0 && d.delta_xy.norm() / d.span <= self.params.max_seed_speed
        });
        let odo_seed = match (self.current, liv_delta) {
            (Some(cur), Some(d)) if delta_ok => Some(cur.compose(&d.to_transform())),
            (Some(cur), _) => Some(cur),
            (None, _) => None,
        };
        let gps_seed = gps_pose.map(|p| RigidTransform3::from_pose2(&p));
        let consistent = |result: &LocalizeResult| {
            gps_pose.map_or(true, |g| {
                result.pose.position_distance(&g) <= self.params.gps_consistency_radius
            })
        };

        let primary = odo_seed.or(gps_seed).ok_or(LocalizerError::NoSeed)?;
        let attempt = localize(&self.map, scan, &primary, &self.params);

        if let Ok(result) = &attempt {
            if result.reliability >= self.params.reliability_threshold && consistent(result) {
                self.current = Some(result.transform);
                return Ok(LocalizerFix {
                    source: FixSource::ScanMatch,
                    result: attempt.unwrap(),
                });
            }
        }

        // primary rejected (low reliability, GPS disagreement, off-track
        // seed, failed solve): retry once from the GPS pose if it offers a
        // distinct seed
        if let Some(seed) = gps_seed {
            if odo_seed.is_some() {
                if let Ok(result) = localize(&self.map, scan, &seed, &self.params) {
                    if result.reliability >= self.params.reliability_threshold
                        && consistent(&result)
                    {
                        self.current = Some(result.transform);
                        return Ok(LocalizerFix {
                            source: FixSource::GpsReseeded,
                            result,
                        });
                    }
                }
            }
        }

        // nothing trustworthy: publish the propagated seed, keep it as the
        // working pose so the next odometry increment still applies
        self.current = Some(primary);
        Ok(LocalizerFix {
            source: FixSource::DeadReckoned,
            result: LocalizeResult {
                transform: primary,
                pose: primary.to_pose2(),
                reliability: 0.0,
                covariance: Matrix3::from_diagonal(&Vector3::repeat(f64::INFINITY)),
                registration: None,
            },
        })
    }
}

/// Parameters for building a map directly from track geometry.
#[derive(Debug, Clone)]
pub struct MapBuildParams {
    pub bucket_length: f64,
    pub points_per_bucket: usize,
    pub leaf_size: f64,
    pub k_neighbors: usize,
    pub kernel: KernelDescriptor,
    pub sampling: SurfaceSampling,
    pub seed: u64,
}

impl Default for MapBuildParams {
    fn default() -> Self {
        MapBuildParams {
            bucket_length: 10.0,
            points_per_bucket: 900,
            leaf_size: 1.0,
            k_neighbors: 8,
            kernel: KernelDescriptor::Laplacian { sigma: 1.0 },
            sampling: SurfaceSampling::default(),
            seed: 500,
        }
    }
}

/// Builds a reference map by sampling the true track surface bucket by
/// bucket. Each bucket draws from its own seed-derived stream, so maps are
/// reproducible and insensitive to bucket order.
pub fn synthesize_track_map(
    track: &TrackDefinition,
    params: &MapBuildParams,
) -> Result<TrackMap, LocalizerError> {
    let n_buckets = (track.length / params.bucket_length).ceil() as i64;
    let mut map = TrackMap::new(params.bucket_length, track.half_width, track.length);
    for key in 0..n_buckets {
        let center = (key as f64 + 0.5) * params.bucket_length;
        let mut rng = ChaCha12Rng::seed_from_u64(params.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(key as u64 + 1)));
        let (points, _) = sample_surface_points(
            track,
            center,
            params.bucket_length / 2.0,
            params.bucket_length / 2.0,
            params.points_per_bucket,
            &params.sampling,
            &mut rng,
        );
        let (kept, _) = registration::voxel_downsample(&points, params.leaf_size * 0.35);
        let cloud = estimate_covariances(
            &kept,
            Frame::Map,
            params.leaf_size,
            params.k_neighbors,
            &params.kernel,
            1,
        )?;
        map.insert(
            key,
            MapBucket {
                cloud,
                reference: track.pose_at(center),
            },
        );
    }
    Ok(map)
}

/// Persists a map as a directory: `map.txt` with the layout and per-bucket
/// point files. Clouds are stored as raw points; loading re-estimates the
/// covariances with the given kernel parameters, which is deterministic.
pub fn save_map(map: &TrackMap, dir: &Path) -> Result<(), LocalizerError> {
    std::fs::create_dir_all(dir).map_err(|e| LocalizerError::Dir {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut meta = String::new();
    meta.push_str(&format!(
        "bucket_length {:.17e}\nhalf_width {:.17e}\ntrack_length {:.17e}\n",
        map.bucket_length, map.half_width, map.track_length
    ));
    for (key, bucket) in &map.buckets {
        let file = format!("bucket_{key:05}.cloud");
        cloud_io::write_points(
            &dir.join(&file),
            &bucket.cloud.means,
            bucket.cloud.frame,
            bucket.cloud.leaf_size,
        )?;
        meta.push_str(&format!(
            "bucket {} {} {:.17e} {:.17e} {:.17e}\n",
            key, file, bucket.reference.x, bucket.reference.y, bucket.reference.theta
        ));
    }
    std::fs::write(dir.join("map.txt"), meta).map_err(|e| LocalizerError::Dir {
        path: dir.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn load_map(
    dir: &Path,
    k_neighbors: usize,
    kernel: &KernelDescriptor,
) -> Result<TrackMap, LocalizerError> {
    let meta_file = dir.join("map.txt");
    let text = std::fs::read_to_string(&meta_file).map_err(|e| LocalizerError::Dir {
        path: meta_file.display().to_string(),
        source: e,
    })?;
    let mut bucket_length = None;
    let mut half_width = None;
    let mut track_length = None;
    let mut buckets: Vec<(i64, String, Pose2)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let bad = |message: &str| LocalizerError::Meta {
            line,
            message: message.to_string(),
        };
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        match fields[0] {
            "bucket_length" | "half_width" | "track_length" => {
                if fields.len() != 2 {
                    return Err(bad("expected one value"));
                }
                let v: f64 = fields[1].parse().map_err(|_| bad("bad float"))?;
                match fields[0] {
                    "bucket_length" => bucket_length = Some(v),
                    "half_width" => half_width = Some(v),
                    _ => track_length = Some(v),
                }
            }
            "bucket" => {
                if fields.len() != 6 {
                    return Err(bad("bucket needs: key file x y theta"));
                }
                let key: i64 = fields[1].parse().map_err(|_| bad("bad key"))?;
                let pose = Pose2::new(
                    fields[3].parse().map_err(|_| bad("bad float"))?,
                    fields[4].parse().map_err(|_| bad("bad float"))?,
                    fields[5].parse().map_err(|_| bad("bad float"))?,
                );
                buckets.push((key, fields[2].to_string(), pose));
            }
            other => return Err(bad(&format!("unknown record '{other}'"))),
        }
    }

    let (Some(bl), Some(hw), Some(tl)) = (bucket_length, half_width, track_length) else {
        return Err(LocalizerError::Meta {
            line: 0,
            message: "missing bucket_length, half_width or track_length".to_string(),
        });
    };
    let mut map = TrackMap::new(bl, hw, tl);
    for (key, file, reference) in buckets {
        let (points, frame, leaf) = cloud_io::read_points(&dir.join(&file))?;
        let cloud = estimate_covariances(&points, frame, leaf, k_neighbors, kernel, 1)?;
        map.insert(key, MapBucket { cloud, reference });
    }
    Ok(map)
}

/// Convenience: body-frame scan points to a Gaussian cloud ready for
/// registration (downsample, then covariance estimation).
pub fn scan_to_cloud(
    points: &[Point3],
    leaf_size: f64,
    k_neighbors: usize,
    kernel: &KernelDescriptor,
    workers: usize,
) -> Result<GaussianCloud, registration::RegistrationError> {
    let (kept, _) = registration::voxel_downsample(points, leaf_size * 0.35);
    estimate_covariances(&kept, Frame::Body, leaf_size, k_neighbors, kernel, workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liv::PreintegratedDelta;
    use crate::sim::{oval, synthesize_scan, BankParams, OvalParams, SensorParams};
    use approx::assert_relative_eq;
    use nalgebra::Vector2;

    fn test_track() -> TrackDefinition {
        oval(OvalParams::default(), BankParams::default(), 0.5)
    }

    fn test_map(track: &TrackDefinition) -> TrackMap {
        synthesize_track_map(track, &MapBuildParams::default()).unwrap()
    }

    fn scan_cloud_at(
        track: &TrackDefinition,
        s: f64,
        seed: u64,
        extra_sigma: f64,
    ) -> (GaussianCloud, Pose2) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(5);
        let pose = track.pose_at(s);
        let sensors = SensorParams {
            lidar_points: 2600,
            ..SensorParams::default()
        };
        let scan = synthesize_scan(track, 0.0, s, 0.0, &pose, &sensors, extra_sigma, &mut rng);
        let cloud = scan_to_cloud(
            &scan.points,
            1.0,
            8,
            &KernelDescriptor::Laplacian { sigma: 1.0 },
            1,
        )
        .unwrap();
        (cloud, pose)
    }

    #[test]
    fn window_of_one_bucket_radius_holds_three_buckets() {
        let track = test_track();
        let map = test_map(&track);
        let hits = map.query_window(57.0, map.bucket_length);
        assert_eq!(hits.len(), 3);
        let keys: Vec<i64> = hits.iter().map(|(k, _)| *k).collect();
        assert!(keys.contains(&4) && keys.contains(&5) && keys.contains(&6));
    }

    #[test]
    fn window_wraps_around_the_ring_seam() {
        let track = test_track();
        let map = test_map(&track);
        let hits = map.query_window(1.0, map.bucket_length);
        assert_eq!(hits.len(), 3, "first bucket must see the last one");
        let keys: Vec<i64> = hits.iter().map(|(k, _)| *k).collect();
        let last = map.keys().max().unwrap();
        assert!(keys.contains(&0) && keys.contains(&1) && keys.contains(&last));
    }

    #[test]
    fn off_track_guess_is_rejected() {
        let track = test_track();
        let map = test_map(&track);
        let (cloud, pose) = scan_cloud_at(&track, 50.0, 1, 0.0);
        let off = track.surface_point(50.0, 3.0 * track.half_width);
        let guess = RigidTransform3::from_yaw_xy(pose.theta, off.x, off.y);
        match localize(&map, &cloud, &guess, &LocalizerParams::default()) {
            Err(LocalizerError::OffTrack { lateral, .. }) => {
                assert!(lateral.abs() > 2.0 * track.half_width)
            }
            other => panic!("expected off-track, got {other:?}"),
        }
    }

    #[test]
    fn clean_scan_localizes_from_a_perturbed_seed() {
        let track = test_track();
        let map = test_map(&track);
        let (cloud, pose) = scan_cloud_at(&track, 50.0, 2, 0.0);
        let guess = RigidTransform3::from_yaw_xy(pose.theta + 0.03, pose.x + 0.5, pose.y - 0.4);
        let out = localize(&map, &cloud, &guess, &LocalizerParams::default()).unwrap();
        assert!(
            out.reliability >= 0.5,
            "clean match should be reliable, got {}",
            out.reliability
        );
        let err = out.pose.position_distance(&pose);
        assert!(err < 0.15, "position error {err}");
        assert!(out.covariance[(0, 0)].is_finite());
    }

    #[test]
    fn heavy_scan_noise_destroys_reliability() {
        let track = test_track();
        let map = test_map(&track);
        let (cloud, pose) = scan_cloud_at(&track, 50.0, 3, 5.0);
        let guess = RigidTransform3::from_pose2(&pose);
        let out = localize(&map, &cloud, &guess, &LocalizerParams::default()).unwrap();
        assert!(
            out.reliability < 0.5,
            "5 m point noise must not look reliable, got {}",
            out.reliability
        );
    }

    #[test]
    fn localizer_accepts_dead_reckons_and_recovers() {
        let track = test_track();
        let map = test_map(&track);
        let params = LocalizerParams::default();
        let mut loc = ScanLocalizer::new(map, params);

        // scan 1: good, seeded from GPS (no previous state)
        let (c1, p1) = scan_cloud_at(&track, 50.0, 11, 0.0);
        let fix1 = loc.check_and_recover(&c1, Some(p1), None).unwrap();
        assert_eq!(fix1.source, FixSource::ScanMatch);
        assert!(fix1.result.pose.position_distance(&p1) < 0.15);

        // scan 2, 5 m ahead: noise burst, no useful gps; dead reckon on the
        // pre-integrated increment
        let delta = PreintegratedDelta {
            delta_yaw: 0.0,
            delta_xy: Vector2::new(5.0, 0.0),
            span: 0.1,
            steps: 10,
        };
        let (c2, p2) = scan_cloud_at(&track, 55.0, 12, 5.0);
        let fix2 = loc.check_and_recover(&c2, None, Some(&delta)).unwrap();
        assert_eq!(fix2.source, FixSource::DeadReckoned);
        assert_relative_eq!(fix2.result.reliability, 0.0);
        assert!(
            fix2.result.pose.position_distance(&p2) < 1.0,
            "dead reckoning should stay near truth over one interval"
        );

        // scan 3: clean again; odometry seed is stale but gps re-seeds
        let (c3, p3) = scan_cloud_at(&track, 60.0, 13, 0.0);
        let junk_delta = PreintegratedDelta {
            delta_yaw: 0.4,
            delta_xy: Vector2::new(-20.0, 8.0),
            span: 0.1,
            steps: 10,
        };
        let fix3 = loc.check_and_recover(&c3, Some(p3), Some(&junk_delta)).unwrap();
        assert!(
            matches!(fix3.source, FixSource::GpsReseeded | FixSource::ScanMatch),
            "got {:?}",
            fix3.source
        );
        assert!(fix3.result.pose.position_distance(&p3) < 0.2);
    }

    #[test]
    fn no_seed_is_an_error() {
        let track = test_track();
        let map = test_map(&track);
        let mut loc = ScanLocalizer::new(map, LocalizerParams::default());
        let (c, _) = scan_cloud_at(&track, 10.0, 14, 0.0);
        assert!(matches!(
            loc.check_and_recover(&c, None, None),
            Err(LocalizerError::NoSeed)
        ));
    }

    #[test]
    fn map_save_load_round_trip_preserves_layout_and_function() {
        let track = test_track();
        let map = test_map(&track);
        let dir = tempfile::tempdir().unwrap();
        save_map(&map, dir.path()).unwrap();
        let loaded = load_map(
            dir.path(),
            8,
            &KernelDescriptor::Laplacian { sigma: 1.0 },
        )
        .unwrap();

        assert_eq!(map.len(), loaded.len());
        assert_relative_eq!(map.track_length, loaded.track_length);
        for key in map.keys() {
            let a = map.bucket(key).unwrap();
            let b = loaded.bucket(key).unwrap();
            assert_eq!(a.reference.x.to_bits(), b.reference.x.to_bits());
            assert_eq!(a.cloud.len(), b.cloud.len());
        }

        // the reloaded map must still localize (points were narrowed to f32)
        let (cloud, pose) = scan_cloud_at(&track, 120.0, 15, 0.0);
        let guess = RigidTransform3::from_yaw_xy(pose.theta, pose.x + 0.3, pose.y);
        let out = localize(&loaded, &cloud, &guess, &LocalizerParams::default()).unwrap();
        assert!(out.reliability >= 0.5);
        assert!(out.pose.position_distance(&pose) < 0.15);
    }
}
