//! Synthetic closed-circuit geometry.
//!
//! Two families are provided. The oval is built from straights, constant
//! curvature arcs and linear curvature ramps; only the first half is
//! integrated and the second half is its point reflection through the
//! midpoint between the two half-lap endpoints, which closes the loop to
//! machine precision. The road course is a smooth polar perturbation of a
//! circle, closed by construction, regenerated with new parameters until it
//! shows enough distinct corners and at least one curvature sign change.

use crate::types::{wrap_angle, Point3, Pose2};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

/// One uniformly spaced centerline sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterlineSample {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub curvature: f64,
    /// Road roll angle; negative banks a left turn so the outside edge sits
    /// higher than the inside edge.
    pub bank: f64,
}

#[derive(Debug, Clone)]
pub struct TrackDefinition {
    pub name: String,
    pub samples: Vec<CenterlineSample>,
    /// Exact spacing; `length = samples.len() * ds`.
    pub ds: f64,
    pub length: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BankParams {
    /// Maximum roll magnitude in radians.
    pub max: f64,
    /// Curvature at which the full bank is reached.
    pub kappa_ref: f64,
}

impl Default for BankParams {
    fn default() -> Self {
        BankParams {
            max: 0.06,
            kappa_ref: 0.03,
        }
    }
}

fn bank_for(kappa: f64, bank: &BankParams) -> f64 {
    if bank.kappa_ref <= 0.0 || bank.max == 0.0 {
        return 0.0;
    }
    let scale = (kappa.abs() / bank.kappa_ref).min(1.0);
    -kappa.signum() * bank.max * scale
}

#[derive(Debug, Clone, Copy)]
pub struct OvalParams {
    pub straight: f64,
    pub radius: f64,
    /// Length of each linear curvature ramp between straight and arc.
    pub ramp: f64,
    pub half_width: f64,
}

impl Default for OvalParams {
    fn default() -> Self {
        OvalParams {
            straight: 80.0,
            radius: 30.0,
            ramp: 15.0,
            half_width: 8.0,
        }
    }
}

/// Piecewise linear curvature segment over [0, len].
#[derive(Debug, Clone, Copy)]
struct KappaSegment {
    len: f64,
    k0: f64,
    k1: f64,
}

/// Curvature and exact heading integral over a segment chain.
struct KappaProfile {
    segments: Vec<KappaSegment>,
    /// Heading at the start of each segment, heading(0) = 0.
    psi_start: Vec<f64>,
    total_len: f64,
}

impl KappaProfile {
    fn new(segments: Vec<KappaSegment>) -> Self {
        let mut psi_start = Vec::with_capacity(segments.len());
        let mut psi = 0.0;
        let mut total = 0.0;
        for seg in &segments {
            psi_start.push(psi);
            // integral of a linear curvature ramp over its full length
            psi += 0.5 * (seg.k0 + seg.k1) * seg.len;
            total += seg.len;
        }
        KappaProfile {
            segments,
            psi_start,
            total_len: total,
        }
    }

    fn kappa(&self, s: f64) -> f64 {
        let (i, local) = self.locate(s);
        let seg = &self.segments[i];
        seg.k0 + (seg.k1 - seg.k0) * (local / seg.len)
    }

    /// Exact heading: curvature is linear per segment so its integral is
    /// quadratic and needs no numeric quadrature.
    fn psi(&self, s: f64) -> f64 {
        let (i, local) = self.locate(s);
        let seg = &self.segments[i];
        let slope = (seg.k1 - seg.k0) / seg.len;
        self.psi_start[i] + seg.k0 * local + 0.5 * slope * local * local
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.total_len);
        let mut acc = 0.0;
        for (i, seg) in self.segments.iter().enumerate() {
            if s <= acc + seg.len || i == self.segments.len() - 1 {
                return (i, (s - acc).clamp(0.0, seg.len));
            }
            acc += seg.len;
        }
        unreachable!("segment chain is never empty");
    }
}

/// Builds a closed oval. The half lap is straight, ramp up, arc, ramp down,
/// with the arc length chosen so the half-lap heading change is exactly pi;
/// the second half is the point reflection of the first.
pub fn oval(params: OvalParams, bank: BankParams, ds_target: f64) -> TrackDefinition {
    assert!(params.radius > 0.0 && params.straight > 0.0 && params.ramp > 0.0);
    assert!(ds_target > 0.0);
    let kappa = 1.0 / params.radius;
    // each ramp contributes kappa * ramp / 2 of heading, the arc the rest
    let arc_len = std::f64::consts::PI / kappa - params.ramp;
    assert!(
        arc_len > 1.0,
        "radius {} and ramp {} leave no room for the arc",
        params.radius,
        params.ramp
    );

    let profile = KappaProfile::new(vec![
        KappaSegment { len: params.straight, k0: 0.0, k1: 0.0 },
        KappaSegment { len: params.ramp, k0: 0.0, k1: kappa },
        KappaSegment { len: arc_len, k0: kappa, k1: kappa },
        KappaSegment { len: params.ramp, k0: kappa, k1: 0.0 },
    ]);

    let track = close_by_reflection("oval", &profile, params.half_width, &bank, ds_target);
    assert!(track.length > 200.0, "oval shorter than intended");
    track
}

/// Integrates the half profile and mirrors it. `n` is forced even so the
/// reflection boundary lands exactly on a sample.
fn close_by_reflection(
    name: &str,
    half: &KappaProfile,
    half_width: f64,
    bank: &BankParams,
    ds_target: f64,
) -> TrackDefinition {
    let half_len = half.total_len;
    let n_half = (half_len / ds_target).round().max(4.0) as usize;
    let n = 2 * n_half;
    let ds = half_len / n_half as f64;

    // integrate position over the first half; heading is exact so each step
    // uses Simpson's rule on the unit tangent
    let mut first: Vec<(f64, f64, f64)> = Vec::with_capacity(n_half + 1);
    let (mut x, mut y) = (0.0, 0.0);
    first.push((x, y, half.psi(0.0)));
    for i in 0..n_half {
        let s0 = i as f64 * ds;
        let sm = s0 + 0.5 * ds;
        let s1 = s0 + ds;
        let (p0, pm, p1) = (half.psi(s0), half.psi(sm), half.psi(s1));
        x += ds / 6.0 * (p0.cos() + 4.0 * pm.cos() + p1.cos());
        y += ds / 6.0 * (p0.sin() + 4.0 * pm.sin() + p1.sin());
        first.push((x, y, p1));
    }

    let (x_end, y_end, _) = first[n_half];
    let ox = 0.5 * (first[0].0 + x_end);
    let oy = 0.5 * (first[0].1 + y_end);

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let s = i as f64 * ds;
        let (px, py, psi, kappa) = if i < n_half {
            let (px, py, psi) = first[i];
            (px, py, psi, half.kappa(s))
        } else {
            let j = i - n_half;
            let (px, py, psi) = first[j];
            (
                2.0 * ox - px,
                2.0 * oy - py,
                psi + std::f64::consts::PI,
                half.kappa(s - half_len),
            )
        };
        samples.push(CenterlineSample {
            s,
            x: px,
            y: py,
            heading: wrap_angle(psi),
            curvature: kappa,
            bank: bank_for(kappa, bank),
        });
    }

    TrackDefinition {
        name: name.to_string(),
        samples,
        ds,
        length: 2.0 * half_len,
        half_width,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoadCourseParams {
    /// Base radius of the underlying circle.
    pub base_radius: f64,
    pub half_width: f64,
    /// Minimum number of distinct corners the layout must show.
    pub min_corners: usize,
}

impl Default for RoadCourseParams {
    fn default() -> Self {
        RoadCourseParams {
            base_radius: 110.0,
            half_width: 7.0,
            min_corners: 4,
        }
    }
}

/// Builds a closed road course: r(phi) = R0 (1 + a2 cos(2 phi + p2)
/// + a3 cos(3 phi + p3)). Harmonic amplitudes and phases are drawn from the
/// seed and redrawn until the layout has enough corners and both curvature
/// signs. The attempt loop is deterministic, so a seed always yields the
/// same track.
pub fn road_course(params: RoadCourseParams, bank: BankParams, seed: u64, ds_target: f64) -> TrackDefinition {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(6);

    for attempt in 0..64 {
        let a2 = rng.random_range(0.06..0.14);
        let a3 = rng.random_range(0.06..0.12);
        let p2 = rng.random_range(0.0..std::f64::consts::TAU);
        let p3 = rng.random_range(0.0..std::f64::consts::TAU);

        let track = polar_track(params.base_radius, a2, a3, p2, p3, params.half_width, &bank, ds_target);
        let corners = count_corners(&track, 0.012, 20.0);
        let has_both_signs = track.samples.iter().any(|c| c.curvature < -1e-4)
            && track.samples.iter().any(|c| c.curvature > 1e-4);
        if corners >= params.min_corners && has_both_signs && track.length > 600.0 {
            let mut track = track;
            track.name = format!("road_course_{seed}_{attempt}");
            return track;
        }
    }
    panic!("no acceptable road course layout after 64 attempts for seed {seed}");
}

fn polar_track(
    r0: f64,
    a2: f64,
    a3: f64,
    p2: f64,
    p3: f64,
    half_width: f64,
    bank: &BankParams,
    ds_target: f64,
) -> TrackDefinition {
    let r = |phi: f64| r0 * (1.0 + a2 * (2.0 * phi + p2).cos() + a3 * (3.0 * phi + p3).cos());
    let dr = |phi: f64| {
        r0 * (-2.0 * a2 * (2.0 * phi + p2).sin() - 3.0 * a3 * (3.0 * phi + p3).sin())
    };
    let ddr = |phi: f64| {
        r0 * (-4.0 * a2 * (2.0 * phi + p2).cos() - 9.0 * a3 * (3.0 * phi + p3).cos())
    };

    // arc length at fine phi resolution, then resample uniformly in s
    let fine = 20_000usize;
    let dphi = std::f64::consts::TAU / fine as f64;
    let mut cum = Vec::with_capacity(fine + 1);
    cum.push(0.0);
    let mut total = 0.0;
    let speed = |phi: f64| {
        let (rr, rp) = (r(phi), dr(phi));
        (rr * rr + rp * rp).sqrt()
    };
    for i in 0..fine {
        let phi0 = i as f64 * dphi;
        // Simpson on |dp/dphi|
        total += dphi / 6.0
            * (speed(phi0) + 4.0 * speed(phi0 + 0.5 * dphi) + speed(phi0 + dphi));
        cum.push(total);
    }

    let n = (total / ds_target).round().max(8.0) as usize;
    let ds = total / n as f64;

    let mut samples = Vec::with_capacity(n);
    let mut cursor = 0usize;
    for i in 0..n {
        let target = i as f64 * ds;
        while cursor + 1 < cum.len() && cum[cursor + 1] < target {
            cursor += 1;
        }
        let seg = cum[cursor + 1] - cum[cursor];
        let frac = if seg > 0.0 { (target - cum[cursor]) / seg } else { 0.0 };
        let phi = (cursor as f64 + frac) * dphi;

        let (rr, rp, rpp) = (r(phi), dr(phi), ddr(phi));
        let x = rr * phi.cos();
        let y = rr * phi.sin();
        // tangent of a polar curve, then its heading
        let tx = rp * phi.cos() - rr * phi.sin();
        let ty = rp * phi.sin() + rr * phi.cos();
        let heading = ty.atan2(tx);
        // signed curvature of r(phi)
        let denom = (rr * rr + rp * rp).powf(1.5);
        let kappa = (rr * rr + 2.0 * rp * rp - rr * rpp) / denom;

        samples.push(CenterlineSample {
            s: target,
            x,
            y,
            heading,
            curvature: kappa,
            bank: bank_for(kappa, bank),
        });
    }

    TrackDefinition {
        name: "road_course".to_string(),
        samples,
        ds,
        length: total,
        half_width,
    }
}

/// Counts local curvature magnitude maxima above `kappa_min`, requiring at
/// least `min_separation` meters between counted corners.
pub fn count_corners(track: &TrackDefinition, kappa_min: f64, min_separation: f64) -> usize {
    let n = track.samples.len();
    let mut corners: Vec<f64> = Vec::new();
    for i in 0..n {
        let prev = track.samples[(i + n - 1) % n].curvature.abs();
        let here = track.samples[i].curvature.abs();
        let next = track.samples[(i + 1) % n].curvature.abs();
        if here >= kappa_min && here >= prev && here > next {
            let s = track.samples[i].s;
            let far_enough = corners.iter().all(|&c| {
                let d = (s - c).abs();
                d.min(track.length - d) >= min_separation
            });
            if far_enough {
                corners.push(s);
            }
        }
    }
    corners.len()
}

/// Projection of a world point onto the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackProjection {
    pub s: f64,
    /// Signed lateral offset, positive to the left of travel.
    pub lateral: f64,
    /// Nearest sample index, usable as the next warm start.
    pub index: usize,
}

impl TrackDefinition {
    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// Interpolated sample at arc length `s` (wrapped into [0, length)).
    pub fn sample_at(&self, s: f64) -> CenterlineSample {
        let n = self.samples.len();
        let s = s.rem_euclid(self.length);
        let idx = (s / self.ds) as usize % n;
        let frac = (s - idx as f64 * self.ds) / self.ds;
        let a = &self.samples[idx];
        let b = &self.samples[(idx + 1) % n];
        CenterlineSample {
            s,
            x: a.x + (b.x - a.x) * frac,
            y: a.y + (b.y - a.y) * frac,
            heading: wrap_angle(a.heading + wrap_angle(b.heading - a.heading) * frac),
            curvature: a.curvature + (b.curvature - a.curvature) * frac,
            bank: a.bank + (b.bank - a.bank) * frac,
        }
    }

    pub fn pose_at(&self, s: f64) -> Pose2 {
        let c = self.sample_at(s);
        Pose2::new(c.x, c.y, c.heading)
    }

    /// World point at lateral offset from the centerline, including the
    /// banked surface height z = lateral * tan(bank).
    pub fn surface_point(&self, s: f64, lateral: f64) -> Point3 {
        let c = self.sample_at(s);
        let (sin_h, cos_h) = c.heading.sin_cos();
        Point3::new(
            c.x - lateral * sin_h,
            c.y + lateral * cos_h,
            lateral * c.bank.tan(),
        )
    }

    /// Nearest centerline point. `hint` narrows the search to a window
    /// around a previous projection; pass None to search the whole track.
    pub fn project(&self, x: f64, y: f64, hint: Option<usize>) -> TrackProjection {
        let n = self.samples.len();
        let indices: Box<dyn Iterator<Item = usize>> = match hint {
            Some(h) => {
                let reach = 60usize.min(n / 2);
                Box::new((0..=2 * reach).map(move |k| (h + n + k - reach) % n))
            }
            None => Box::new(0..n),
        };

        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for i in indices {
            let c = &self.samples[i];
            let d2 = (c.x - x).powi(2) + (c.y - y).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }

        // refine on the two segments adjacent to the best sample
        let mut result = TrackProjection {
            s: self.samples[best].s,
            lateral: 0.0,
            index: best,
        };
        let mut result_d2 = f64::INFINITY;
        for start in [(best + n - 1) % n, best] {
            let a = &self.samples[start];
            let b = &self.samples[(start + 1) % n];
            let (ex, ey) = (b.x - a.x, b.y - a.y);
            let seg_len2 = ex * ex + ey * ey;
            let t = if seg_len2 > 0.0 {
                (((x - a.x) * ex + (y - a.y) * ey) / seg_len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (px, py) = (a.x + t * ex, a.y + t * ey);
            let d2 = (x - px).powi(2) + (y - py).powi(2);
            if d2 < result_d2 {
                result_d2 = d2;
                let heading = wrap_angle(a.heading + wrap_angle(b.heading - a.heading) * t);
                let (sin_h, cos_h) = heading.sin_cos();
                result = TrackProjection {
                    s: (a.s + t * self.ds).rem_euclid(self.length),
                    lateral: -(x - px) * sin_h + (y - py) * cos_h,
                    index: best,
                };
            }
        }
        result
    }

    /// Forward arc distance from `s0` to `s1` around the loop.
    pub fn forward_distance(&self, s0: f64, s1: f64) -> f64 {
        (s1 - s0).rem_euclid(self.length)
    }

    /// Shortest circular arc distance between two arc lengths.
    pub fn circular_distance(&self, s0: f64, s1: f64) -> f64 {
        let d = (s1 - s0).rem_euclid(self.length);
        d.min(self.length - d)
    }
}

/// Curvature-limited target speed per centerline sample with longitudinal
/// acceleration limits applied both ways around the loop.
#[derive(Debug, Clone)]
pub struct SpeedProfile {
    pub v: Vec<f64>,
}

impl SpeedProfile {
    pub fn build(track: &TrackDefinition, v_max: f64, a_lat: f64, a_lon: f64) -> Self {
        assert!(v_max > 0.0 && a_lat > 0.0 && a_lon > 0.0);
        let n = track.samples.len();
        let ds = track.ds;
        let mut v: Vec<f64> = track
            .samples
            .iter()
            .map(|c| {
                let k = c.curvature.abs();
                if k < 1e-9 {
                    v_max
                } else {
                    (a_lat / k).sqrt().min(v_max)
                }
            })
            .collect();

        // braking limit propagated backwards, twice around for the seam
        for pass in 0..2 {
            for step in 0..n {
                let i = (2 * n - 1 - step - pass * n) % n;
                let next = (i + 1) % n;
                let cap = (v[next] * v[next] + 2.0 * a_lon * ds).sqrt();
                if v[i] > cap {
                    v[i] = cap;
                }
            }
        }
        // acceleration limit propagated forwards
        for _ in 0..2 {
            for i in 0..n {
                let next = (i + 1) % n;
                let cap = (v[i] * v[i] + 2.0 * a_lon * ds).sqrt();
                if v[next] > cap {
                    v[next] = cap;
                }
            }
        }
        SpeedProfile { v }
    }

    pub fn at(&self, track: &TrackDefinition, s: f64) -> f64 {
        let n = self.v.len();
        let s = s.rem_euclid(track.length);
        let idx = (s / track.ds) as usize % n;
        let frac = (s - idx as f64 * track.ds) / track.ds;
        self.v[idx] + (self.v[(idx + 1) % n] - self.v[idx]) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn oval_closes_exactly() {
        let track = oval(OvalParams::default(), BankParams::default(), 0.5);
        let start = track.sample_at(0.0);
        let wrapped = track.sample_at(track.length);
        assert_relative_eq!(start.x, wrapped.x, epsilon = 1e-12);
        assert_relative_eq!(start.y, wrapped.y, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(start.heading - wrapped.heading), 0.0, epsilon = 1e-12);
        assert!(track.length > 200.0);
    }

    #[test]
    fn oval_second_half_is_a_point_reflection() {
        let track = oval(OvalParams::default(), BankParams::default(), 0.5);
        let n = track.samples.len();
        let half = n / 2;
        let ox = 0.5 * (track.samples[0].x + track.samples[half].x);
        let oy = 0.5 * (track.samples[0].y + track.samples[half].y);
        for i in [0usize, 7, half / 2, half - 1] {
            let a = &track.samples[i];
            let b = &track.samples[i + half];
            assert_relative_eq!(b.x, 2.0 * ox - a.x, epsilon = 1e-9);
            assert_relative_eq!(b.y, 2.0 * oy - a.y, epsilon = 1e-9);
            assert_relative_eq!(
                wrap_angle(b.heading - a.heading - std::f64::consts::PI),
                0.0,
                epsilon = 1e-9
            );
            assert_relative_eq!(b.curvature, a.curvature, epsilon = 1e-12);
        }
    }

    #[test]
    fn heading_derivative_matches_curvature() {
        let track = oval(OvalParams::default(), BankParams::default(), 0.5);
        let n = track.samples.len();
        for i in (0..n).step_by(17) {
            let a = &track.samples[i];
            let b = &track.samples[(i + 1) % n];
            let dpsi = wrap_angle(b.heading - a.heading);
            let k_mid = 0.5 * (a.curvature + b.curvature);
            assert_relative_eq!(dpsi / track.ds, k_mid, epsilon = 2e-3, max_relative = 2e-2);
        }
    }

    #[test]
    fn successive_samples_are_ds_apart() {
        let track = oval(OvalParams::default(), BankParams::default(), 0.5);
        let n = track.samples.len();
        for i in (0..n).step_by(23) {
            let a = &track.samples[i];
            let b = &track.samples[(i + 1) % n];
            let d = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
            // chord is slightly shorter than arc on curved stretches
            assert!(
                (d - track.ds).abs() < 1e-3 * track.ds,
                "sample spacing {d} vs ds {} at {i}",
                track.ds
            );
        }
    }

    #[test]
    fn road_course_is_long_and_twisty() {
        let track = road_course(RoadCourseParams::default(), BankParams::default(), 11, 0.5);
        assert!(track.length > 600.0, "length {}", track.length);
        assert!(count_corners(&track, 0.012, 20.0) >= 4);
        assert!(track.samples.iter().any(|c| c.curvature > 1e-4));
        assert!(track.samples.iter().any(|c| c.curvature < -1e-4));
        // closure
        let start = track.sample_at(0.0);
        let wrapped = track.sample_at(track.length);
        assert_relative_eq!(start.x, wrapped.x, epsilon = 1e-9);
        assert_relative_eq!(start.y, wrapped.y, epsilon = 1e-9);
    }

    #[test]
    fn road_course_generation_is_deterministic() {
        let a = road_course(RoadCourseParams::default(), BankParams::default(), 42, 0.5);
        let b = road_course(RoadCourseParams::default(), BankParams::default(), 42, 0.5);
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x.x.to_bits(), y.x.to_bits());
            assert_eq!(x.y.to_bits(), y.y.to_bits());
            assert_eq!(x.curvature.to_bits(), y.curvature.to_bits());
        }
    }

    #[test]
    fn projection_inverts_surface_offsets() {
        let track = oval(OvalParams::default(), BankParams::default(), 0.5);
        for (s, lateral) in [(15.0, 2.5), (120.0, -4.0), (200.0, 0.0), (300.0, 6.0)] {
            let p = track.surface_point(s, lateral);
            let proj = track.project(p.x, p.y, None);
            assert!(
                track.circular_distance(proj.s, s) < 0.05,
                "s {} recovered as {}",
                s,
                proj.s
            );
            assert_relative_eq!(proj.lateral, lateral, epsilon = 0.05);
        }
    }

    #[test]
    fn warm_started_projection_matches_global_search() {
        let track = oval(OvalParams::default(), BankParams::default(), 0.5);
        let p = track.surface_point(140.0, 1.0);
        let global = track.project(p.x, p.y, None);
        let warm = track.project(p.x, p.y, Some(global.index + 3));
        assert_relative_eq!(global.s, warm.s, epsilon = 1e-12);
        assert_relative_eq!(global.lateral, warm.lateral, epsilon = 1e-12);
    }

    #[test]
    fn banking_raises_the_outside_edge() {
        let track = oval(OvalParams::default(), BankParams::default(), 0.5);
        // find a solid left-hand corner sample
        let s = track
            .samples
            .iter()
            .find(|c| c.curvature > 0.9 / OvalParams::default().radius)
            .expect("oval has an arc")
            .s;
        let inside = track.surface_point(s, track.half_width); // left = inside of a left turn
        let outside = track.surface_point(s, -track.half_width);
        assert!(
            outside.z > inside.z,
            "outside z {} must exceed inside z {}",
            outside.z,
            inside.z
        );
    }

    #[test]
    fn speed_profile_respects_both_limits() {
        let track = oval(OvalParams::default(), BankParams::default(), 0.5);
        let profile = SpeedProfile::build(&track, 40.0, 8.0, 6.0);
        let n = profile.v.len();
        for i in 0..n {
            let v = profile.v[i];
            let k = track.samples[i].curvature.abs();
            assert!(v * v * k <= 8.0 + 1e-9, "lateral limit violated at {i}");
            let next = profile.v[(i + 1) % n];
            let dv2 = next * next - v * v;
            assert!(
                dv2.abs() <= 2.0 * 6.0 * track.ds + 1e-9,
                "longitudinal limit violated at {i}"
            );
        }
        // the straight leaves room to accelerate well past corner speed
        let v_corner = (8.0 / track.samples.iter().map(|c| c.curvature.abs()).fold(0.0, f64::max)).sqrt();
        assert!(profile.v.iter().cloned().fold(0.0, f64::max) > v_corner + 10.0);
    }
}
