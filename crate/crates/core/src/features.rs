//! Arc-length projection and input normalization.
//!
//! Raw session records carry a 3-D position and receiver quality factors.
//! The core model consumes `(s, ṡ, g)`: progress along the closed reference
//! track normalized to `[0, 1)`, speed along the track scaled to unit mean,
//! and log-DOP / z-scored satellite count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::SpdMatrix;

pub type Point3 = [f64; 3];

/// Number of normalized quality features: four log-DOPs and the satellite count.
pub const QUALITY_DIM: usize = 5;

/// Sentinel for a DOP value the receiver did not report.
pub const MISSING_DOP: f64 = -1.0;

/// Tolerance on the sampling period within a session, seconds.
pub const SAMPLING_TOL: f64 = 1e-6;

/// A closed polyline. The last waypoint connects back to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrack {
    waypoints: Vec<Point3>,
    /// Arc length at the start of each segment, plus the total at the end.
    cumulative: Vec<f64>,
}

impl ReferenceTrack {
    pub fn new(waypoints: Vec<Point3>) -> Result<Self> {
        if waypoints.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "a track needs at least 3 waypoints, got {}",
                waypoints.len()
            )));
        }
        let n = waypoints.len();
        let mut cumulative = Vec::with_capacity(n + 1);
        cumulative.push(0.0);
        for i in 0..n {
            let a = waypoints[i];
            let b = waypoints[(i + 1) % n];
            let len = dist(a, b);
            if !(len > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "waypoints {i} and {} coincide",
                    (i + 1) % n
                )));
            }
            cumulative.push(cumulative[i] + len);
        }
        Ok(ReferenceTrack {
            waypoints,
            cumulative,
        })
    }

    pub fn waypoints(&self) -> &[Point3] {
        &self.waypoints
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    pub fn segment_count(&self) -> usize {
        self.waypoints.len()
    }

    /// Wraps an arc length into `[0, total_length)`.
    pub fn wrap(&self, s: f64) -> f64 {
        let total = self.total_length();
        let w = s.rem_euclid(total);
        if w >= total {
            0.0
        } else {
            w
        }
    }

    fn segment_of(&self, s: f64) -> usize {
        // cumulative is sorted; find last start <= s.
        let idx = self.cumulative.partition_point(|c| *c <= s);
        idx.saturating_sub(1).min(self.segment_count() - 1)
    }

    /// Point on the polyline at arc length `s` (wrapped).
    pub fn point_at(&self, s: f64) -> Point3 {
        let s = self.wrap(s);
        let i = self.segment_of(s);
        let a = self.waypoints[i];
        let b = self.waypoints[(i + 1) % self.segment_count()];
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let u = ((s - self.cumulative[i]) / len).clamp(0.0, 1.0);
        lerp(a, b, u)
    }

    /// Unit tangent of the segment containing `s`.
    pub fn tangent_at(&self, s: f64) -> Point3 {
        let i = self.segment_of(self.wrap(s));
        let a = self.waypoints[i];
        let b = self.waypoints[(i + 1) % self.segment_count()];
        let len = dist(a, b);
        [(b[0] - a[0]) / len, (b[1] - a[1]) / len, (b[2] - a[2]) / len]
    }
}

fn dist(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn lerp(a: Point3, b: Point3, u: f64) -> Point3 {
    [
        a[0] + u * (b[0] - a[0]),
        a[1] + u * (b[1] - a[1]),
        a[2] + u * (b[2] - a[2]),
    ]
}

/// Arc length of the closest point on the track, and the segment it lies on.
///
/// Exact point-to-segment projection over every segment; ties go to the
/// lowest segment index.
pub fn project_arclength(pos: Point3, track: &ReferenceTrack) -> (f64, usize) {
    let n = track.segment_count();
    let mut best = (f64::INFINITY, 0.0, 0usize);
    for i in 0..n {
        let a = track.waypoints[i];
        let b = track.waypoints[(i + 1) % n];
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let ap = [pos[0] - a[0], pos[1] - a[1], pos[2] - a[2]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
        let u = ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0);
        let d2 = {
            let q = lerp(a, b, u);
            (pos[0] - q[0]).powi(2) + (pos[1] - q[1]).powi(2) + (pos[2] - q[2]).powi(2)
        };
        if d2 < best.0 {
            let seg_len = track.cumulative[i + 1] - track.cumulative[i];
            best = (d2, track.cumulative[i] + u * seg_len, i);
        }
    }
    (track.wrap(best.1), best.2)
}

/// Along-track speed by finite differences.
///
/// Central differences in the interior and one-sided at the ends. With a
/// `period` (the track length) the sequence is unwrapped first, so crossing
/// the start line does not produce a spike.
pub fn finite_diff_sdot(s: &[f64], dt: f64, period: Option<f64>) -> Result<Vec<f64>> {
    if s.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples to differentiate, got {}",
            s.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("sampling period must be positive, got {dt}")));
    }
    let unwrapped = match period {
        Some(p) => unwrap(s, p),
        None => s.to_vec(),
    };
    let n = unwrapped.len();
    let mut out = Vec::with_capacity(n);
    out.push((unwrapped[1] - unwrapped[0]) / dt);
    for k in 1..n - 1 {
        out.push((unwrapped[k + 1] - unwrapped[k - 1]) / (2.0 * dt));
    }
    out.push((unwrapped[n - 1] - unwrapped[n - 2]) / dt);
    Ok(out)
}

fn unwrap(s: &[f64], period: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.len());
    let mut offset = 0.0;
    out.push(s[0]);
    for w in s.windows(2) {
        let d = w[1] - w[0];
        if d < -0.5 * period {
            offset += period;
        } else if d > 0.5 * period {
            offset -= period;
        }
        out.push(w[1] + offset);
    }
    out
}

/// Receiver-reported quality factors for one fix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnssQuality {
    pub gdop: f64,
    pub hdop: f64,
    pub vdop: f64,
    pub pdop: f64,
    pub sat_count: u32,
}

impl GnssQuality {
    fn dops(&self) -> [f64; 4] {
        [self.gdop, self.hdop, self.vdop, self.pdop]
    }
}

pub fn is_missing_dop(v: f64) -> bool {
    !(v > 0.0) || !v.is_finite()
}

/// One timestep of a drive session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub t: f64,
    pub position: Point3,
    pub quality: GnssQuality,
    /// `ε = p − y`: true position minus the reported fix.
    pub residual: [f64; 3],
    pub truth_cov: Option<SpdMatrix>,
}

/// Normalized `(s, ṡ, g)` for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub s_norm: f64,
    pub sdot_norm: f64,
    pub g_norm: Vec<f64>,
}

/// Checks monotone time with a constant step and returns that step.
pub fn sampling_period(records: &[SessionRecord]) -> Result<f64> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a session needs at least 2 records, got {}",
            records.len()
        )));
    }
    let dt = records[1].t - records[0].t;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("timestamps must be strictly increasing".into()));
    }
    for (k, w) in records.windows(2).enumerate() {
        let d = w[1].t - w[0].t;
        if !(d > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "timestamps not strictly increasing at record {}",
                k + 1
            )));
        }
        if (d - dt).abs() > SAMPLING_TOL {
            return Err(Error::InvalidArgument(format!(
                "sampling period changes at record {}: {d} vs {dt}",
                k + 1
            )));
        }
    }
    Ok(dt)
}

/// Arc-length coordinate (meters, wrapped) of every record.
pub fn arc_lengths(records: &[SessionRecord], track: &ReferenceTrack) -> Vec<f64> {
    records
        .iter()
        .map(|r| project_arclength(r.position, track).0)
        .collect()
}

/// Maps a session to model inputs.
///
/// * `s_norm = s / total_length`
/// * DOPs go to `ln(DOP)`; missing values are replaced by the per-sequence
///   maximum of that DOP first
/// * satellite count is z-scored per sequence (zero spread gives 0)
/// * `ṡ` is scaled so its discrete mean is 1, i.e. `Σ ṡ Δt = T`
pub fn normalize_features(
    records: &[SessionRecord],
    track: &ReferenceTrack,
) -> Result<Vec<FeatureVector>> {
    let dt = sampling_period(records)?;
    let total = track.total_length();
    let s = arc_lengths(records, track);
    let sdot = finite_diff_sdot(&s, dt, Some(total))?;
    let mean_sdot = sdot.iter().sum::<f64>() / sdot.len() as f64;
    if !(mean_sdot.abs() > f64::EPSILON * total) || !mean_sdot.is_finite() {
        return Err(Error::NormalizationDegenerate(
            "along-track speed averages to zero (stationary session)".into(),
        ));
    }

    let mut log_dops = [const { Vec::new() }; 4];
    for (d, col) in log_dops.iter_mut().enumerate() {
        let raw: Vec<f64> = records.iter().map(|r| r.quality.dops()[d]).collect();
        let fill = raw
            .iter()
            .copied()
            .filter(|v| !is_missing_dop(*v))
            .fold(f64::NEG_INFINITY, f64::max);
        if !fill.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "every {} value in the session is missing",
                ["gdop", "hdop", "vdop", "pdop"][d]
            )));
        }
        *col = raw
            .into_iter()
            .map(|v| if is_missing_dop(v) { fill } else { v }.ln())
            .collect();
    }

    let sats: Vec<f64> = records.iter().map(|r| r.quality.sat_count as f64).collect();
    let n = sats.len() as f64;
    let sat_mean = sats.iter().sum::<f64>() / n;
    let sat_std = (sats.iter().map(|x| (x - sat_mean).powi(2)).sum::<f64>() / n).sqrt();

    Ok((0..records.len())
        .map(|k| {
            let z = if sat_std > 0.0 {
                (sats[k] - sat_mean) / sat_std
            } else {
                0.0
            };
            let s_norm = (s[k] / total).clamp(0.0, 1.0);
            FeatureVector {
                s_norm: if s_norm >= 1.0 { 0.0 } else { s_norm },
                sdot_norm: sdot[k] / mean_sdot,
                g_norm: vec![log_dops[0][k], log_dops[1][k], log_dops[2][k], log_dops[3][k], z],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> ReferenceTrack {
        ReferenceTrack::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ])
        .unwrap()
    }

    fn curved_track() -> ReferenceTrack {
        let pts = (0..40)
            .map(|i| {
                let a = i as f64 / 40.0 * std::f64::consts::TAU;
                [100.0 * a.cos(), 60.0 * a.sin(), 5.0 * (2.0 * a).sin()]
            })
            .collect();
        ReferenceTrack::new(pts).unwrap()
    }

    fn record(t: f64, position: Point3, dop: f64, sats: u32) -> SessionRecord {
        SessionRecord {
            t,
            position,
            quality: GnssQuality {
                gdop: dop,
                hdop: dop,
                vdop: dop,
                pdop: dop,
                sat_count: sats,
            },
            residual: [0.0; 3],
            truth_cov: None,
        }
    }

    #[test]
    fn track_validation() {
        assert!(ReferenceTrack::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).is_err());
        assert!(ReferenceTrack::new(vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]]).is_err());
        assert_eq!(unit_square().total_length(), 4.0);
    }

    #[test]
    fn projection_examples() {
        let sq = unit_square();
        assert_eq!(project_arclength([0.0, 0.0, 0.0], &sq), (0.0, 0));
        assert_eq!(project_arclength([0.5, 0.0, 0.0], &sq).0, 0.5);
        // Off-track point projects to the nearest edge.
        assert_eq!(project_arclength([0.5, -0.2, 0.0], &sq).0, 0.5);
        // Equidistant from edges 0 and 3 at the corner region: lowest index wins.
        let (s, seg) = project_arclength([-0.1, -0.1, 0.0], &sq);
        assert_eq!((s, seg), (0.0, 0));
    }

    #[test]
    fn projection_matches_dense_sampling() {
        let track = curved_track();
        let total = track.total_length();
        let samples = 10_000;
        let spacing = total / samples as f64;
        let dense: Vec<(f64, Point3)> = (0..samples)
            .map(|i| {
                let s = i as f64 * spacing;
                (s, track.point_at(s))
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let s0 = rng.random_range(0.0..total);
            let p = track.point_at(s0);
            let pos = [
                p[0] + rng.random_range(-2.0..2.0),
                p[1] + rng.random_range(-2.0..2.0),
                p[2] + rng.random_range(-0.5..0.5),
            ];
            let (s, _) = project_arclength(pos, &track);
            let (s_dense, _) = dense
                .iter()
                .map(|(s, q)| (*s, dist(*q, pos)))
                .fold((0.0, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best });
            let diff = (s - s_dense).abs();
            let diff = diff.min(total - diff);
            assert!(diff <= spacing, "s={s} dense={s_dense}");
        }
    }

    #[test]
    fn sdot_examples() {
        assert_eq!(finite_diff_sdot(&[0.0, 1.0, 2.0, 3.0], 1.0, None).unwrap(), vec![1.0; 4]);
        let wrapped = finite_diff_sdot(&[9.0, 9.5, 0.0, 0.5], 0.5, Some(10.0)).unwrap();
        assert_eq!(wrapped, vec![1.0; 4]);
        assert!(finite_diff_sdot(&[1.0], 1.0, None).is_err());
        assert!(finite_diff_sdot(&[1.0, 2.0], 0.0, None).is_err());
    }

    #[test]
    fn sdot_second_order_accuracy() {
        let dt = 0.01;
        let s: Vec<f64> = (0..500).map(|k| (k as f64 * dt).sin() + 3.0 * k as f64 * dt).collect();
        let v = finite_diff_sdot(&s, dt, None).unwrap();
        for k in 1..499 {
            let exact = (k as f64 * dt).cos() + 3.0;
            assert!((v[k] - exact).abs() < dt * dt, "k={k}");
        }
    }

    #[test]
    fn unit_dops_give_zero_log_features() {
        let sq = unit_square();
        let recs: Vec<_> = (0..8)
            .map(|k| record(k as f64 * 0.1, sq.point_at(k as f64 * 0.25), 1.0, 10))
            .collect();
        let f = normalize_features(&recs, &sq).unwrap();
        for fv in &f {
            assert!(fv.g_norm[..4].iter().all(|x| *x == 0.0));
            // Constant satellite count has zero spread.
            assert_eq!(fv.g_norm[4], 0.0);
        }
    }

    #[test]
    fn constant_speed_normalizes_to_one() {
        let track = curved_track();
        let dt = 0.05;
        let recs: Vec<_> = (0..100)
            .map(|k| record(k as f64 * dt, track.point_at(7.0 * k as f64 * dt), 1.3, 12))
            .collect();
        let f = normalize_features(&recs, &track).unwrap();
        for fv in &f {
            assert!((fv.sdot_norm - 1.0).abs() < 1e-6, "{}", fv.sdot_norm);
            assert!((0.0..1.0).contains(&fv.s_norm));
        }
    }

    #[test]
    fn stationary_session_is_degenerate() {
        let sq = unit_square();
        let recs: Vec<_> = (0..5).map(|k| record(k as f64, [0.5, 0.0, 0.0], 1.0, 9)).collect();
        assert!(matches!(
            normalize_features(&recs, &sq),
            Err(Error::NormalizationDegenerate(_))
        ));
    }

    #[test]
    fn missing_dop_reads_as_worst_case() {
        let sq = unit_square();
        let mut recs: Vec<_> = (0..6)
            .map(|k| record(k as f64, sq.point_at(0.3 * k as f64), 1.0 + k as f64, 9))
            .collect();
        recs[2].quality.hdop = MISSING_DOP;
        let f = normalize_features(&recs, &sq).unwrap();
        assert_eq!(f[2].g_norm[1], 6.0_f64.ln());
    }

    #[test]
    fn non_uniform_sampling_is_rejected() {
        let sq = unit_square();
        let recs = vec![
            record(0.0, sq.point_at(0.0), 1.0, 9),
            record(1.0, sq.point_at(0.1), 1.0, 9),
            record(2.5, sq.point_at(0.2), 1.0, 9),
        ];
        assert!(normalize_features(&recs, &sq).is_err());
    }

    fn random_session(seed: u64, track: &ReferenceTrack) -> Vec<SessionRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = rng.random_range(0.0..track.total_length());
        (0..300)
            .map(|k| {
                s += rng.random_range(0.5..3.0);
                record(
                    k as f64 * 0.05,
                    track.point_at(s),
                    rng.random_range(0.6..20.0),
                    rng.random_range(5..25),
                )
            })
            .collect()
    }

    #[test]
    fn mixed_session_has_unit_mean_speed() {
        let track = curved_track();
        let f = normalize_features(&random_session(3, &track), &track).unwrap();
        let mean = f.iter().map(|x| x.sdot_norm).sum::<f64>() / f.len() as f64;
        assert!((mean - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn reprojection_is_idempotent(x in -150.0f64..150.0, y in -100.0f64..100.0, z in -5.0f64..5.0) {
            let track = curved_track();
            let (s, _) = project_arclength([x, y, z], &track);
            let (s2, _) = project_arclength(track.point_at(s), &track);
            let d = (s - s2).abs();
            prop_assert!(d.min(track.total_length() - d) < 1e-9);
        }

        #[test]
        fn normalization_is_scale_equivariant(seed in any::<u64>(), k in 0.1f64..10.0) {
            let track = curved_track();
            let recs = random_session(seed, &track);
            let base = normalize_features(&recs, &track).unwrap();
            prop_assert!(base.iter().all(|f| f.sdot_norm.is_finite()
                && f.s_norm.is_finite() && f.g_norm.iter().all(|g| g.is_finite())));

            let mut scaled = recs.clone();
            for r in &mut scaled {
                r.quality.gdop *= k;
                r.quality.hdop *= k;
                r.quality.vdop *= k;
                r.quality.pdop *= k;
            }
            let sf = normalize_features(&scaled, &track).unwrap();
            for (a, b) in base.iter().zip(&sf) {
                for d in 0..4 {
                    prop_assert!((b.g_norm[d] - a.g_norm[d] - k.ln()).abs() < 1e-12);
                }
                prop_assert_eq!(a.g_norm[4], b.g_norm[4]);
            }

            // Stretching time by k scales ṡ by 1/k; normalized speed is unchanged.
            let mut slow = recs.clone();
            for r in &mut slow {
                r.t *= k;
            }
            let sl = normalize_features(&slow, &track).unwrap();
            for (a, b) in base.iter().zip(&sl) {
                prop_assert!((a.sdot_norm - b.sdot_norm).abs() < 1e-9);
            }
        }
    }
}
