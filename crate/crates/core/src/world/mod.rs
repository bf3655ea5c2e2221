//! Synthetic closed-track world with bridge-like GNSS degradation zones.
//!
//! The residual covariance is a known field over arc length, so every
//! generated session carries its own oracle.

pub mod io;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{GnssQuality, Point3, ReferenceTrack, SessionRecord};
use crate::spd::SpdMatrix;

pub use io::{read_jsonl, read_jsonl_str, write_jsonl, write_jsonl_string};

pub const WORLD_CONFIG_VERSION: u32 = 1;
pub const DEFAULT_RAMP: f64 = 15.0;

/// A degradation zone centered on the track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bridge {
    pub center_s: f64,
    pub half_width: f64,
    /// Covariance inflation factor inside the footprint.
    pub severity: f64,
    /// Fraction of the degradation that shows up in DOP and satellite count.
    pub dop_coupling: f64,
}

/// Stadium oval: two straights joined by polygonal half circles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    pub length: f64,
    pub radius: f64,
    /// Chords per half circle.
    pub arc_segments: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            length: 3600.0,
            radius: 250.0,
            arc_segments: 48,
        }
    }
}

impl TrackConfig {
    /// Builds the polyline; the straights absorb the chord shortfall so the
    /// total length is exactly `length`.
    pub fn build(&self) -> Result<ReferenceTrack> {
        let m = self.arc_segments;
        if m < 2 || !(self.radius > 0.0) {
            return Err(Error::Config("track needs radius > 0 and arc_segments >= 2".into()));
        }
        let chord = 2.0 * self.radius * (std::f64::consts::PI / (2.0 * m as f64)).sin();
        let straight = (self.length - 2.0 * m as f64 * chord) / 2.0;
        if !(straight > 0.0) {
            return Err(Error::Config(format!(
                "track length {} is too short for radius {}",
                self.length, self.radius
            )));
        }
        let r = self.radius;
        let arc = |cx: f64, start: f64| {
            (1..m).map(move |j| {
                let a = start + std::f64::consts::PI * j as f64 / m as f64;
                [cx + r * a.cos(), r * a.sin(), 0.0]
            })
        };
        // Lower straight heading +x, right turn, upper straight, left turn.
        let mut pts: Vec<Point3> = vec![[0.0, -r, 0.0], [straight, -r, 0.0]];
        pts.extend(arc(straight, -std::f64::consts::FRAC_PI_2));
        pts.extend([[straight, r, 0.0], [0.0, r, 0.0]]);
        pts.extend(arc(0.0, std::f64::consts::FRAC_PI_2));
        ReferenceTrack::new(pts)
    }
}

/// Speed along the track: `mean + amplitude · cos(2π · periods · s / L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedProfile {
    pub mean: f64,
    pub amplitude: f64,
    pub periods: f64,
}

impl Default for SpeedProfile {
    fn default() -> Self {
        SpeedProfile {
            mean: 50.0,
            amplitude: 15.0,
            periods: 2.0,
        }
    }
}

impl SpeedProfile {
    pub fn speed(&self, s: f64, length: f64) -> f64 {
        self.mean + self.amplitude * (std::f64::consts::TAU * self.periods * s / length).cos()
    }
}

/// Open-sky receiver quality and its response to bridges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityConfig {
    pub gdop: f64,
    pub hdop: f64,
    pub vdop: f64,
    pub pdop: f64,
    pub sat_count: u32,
    /// Satellites lost at a fully coupled bridge center.
    pub sat_drop: u32,
    /// Log-scale spread of the multiplicative DOP jitter.
    pub dop_jitter: f64,
    /// Satellite count jitter is uniform on `{−j, …, j}`.
    pub sat_jitter: u32,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            gdop: 1.6,
            hdop: 0.8,
            vdop: 1.2,
            pdop: 1.4,
            sat_count: 18,
            sat_drop: 10,
            dop_jitter: 0.1,
            sat_jitter: 1,
        }
    }
}

impl QualityConfig {
    fn baseline(&self) -> [f64; 4] {
        [self.gdop, self.hdop, self.vdop, self.pdop]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub version: u32,
    pub track: TrackConfig,
    pub bridges: Vec<Bridge>,
    /// Open-sky residual covariance, m², by rows.
    pub base_cov: [[f64; 3]; 3],
    pub speed: SpeedProfile,
    pub quality: QualityConfig,
    /// Receiver rate, Hz.
    pub gnss_rate: f64,
    /// Raised-cosine ramp on each side of a bridge footprint, m.
    pub ramp: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    /// Four bridges of mixed severity; the third barely degrades the fix
    /// and is invisible in DOP.
    fn default() -> Self {
        WorldConfig {
            version: WORLD_CONFIG_VERSION,
            track: TrackConfig::default(),
            bridges: vec![
                Bridge {
                    center_s: 450.0,
                    half_width: 12.0,
                    severity: 400.0,
                    dop_coupling: 0.8,
                },
                Bridge {
                    center_s: 1350.0,
                    half_width: 8.0,
                    severity: 60.0,
                    dop_coupling: 0.3,
                },
                Bridge {
                    center_s: 2250.0,
                    half_width: 10.0,
                    severity: 1.5,
                    dop_coupling: 0.02,
                },
                Bridge {
                    center_s: 3050.0,
                    half_width: 15.0,
                    severity: 900.0,
                    dop_coupling: 0.6,
                },
            ],
            base_cov: [[0.04, 0.0, 0.0], [0.0, 0.04, 0.0], [0.0, 0.0, 0.04]],
            speed: SpeedProfile::default(),
            quality: QualityConfig::default(),
            gnss_rate: 20.0,
            ramp: DEFAULT_RAMP,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// The default layout with every bridge at severity 2500 (10 m standard
    /// deviation at the center on a 0.04 m² base).
    pub fn high_severity() -> Self {
        let mut cfg = WorldConfig::default();
        for b in &mut cfg.bridges {
            b.severity = 2500.0;
            b.dop_coupling = b.dop_coupling.max(0.5);
        }
        cfg
    }

    /// The default track with no degradation anywhere.
    pub fn open_sky() -> Self {
        WorldConfig {
            bridges: Vec::new(),
            ..WorldConfig::default()
        }
    }

    pub fn base_cov(&self) -> Result<SpdMatrix> {
        SpdMatrix::from_rows(&self.base_cov.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
            .map_err(|e| Error::Config(format!("base_cov: {e}")))
    }

    pub fn delta_t(&self) -> f64 {
        1.0 / self.gnss_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != WORLD_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "world config version {} is not supported (expected {WORLD_CONFIG_VERSION})",
                self.version
            )));
        }
        let length = self.track.length;
        self.track.build()?;
        self.base_cov()?;
        if !(self.gnss_rate > 0.0) || !(self.ramp >= 0.0) {
            return Err(Error::Config("gnss_rate must be positive and ramp non-negative".into()));
        }
        let sp = &self.speed;
        if !(sp.mean > 0.0) || !(sp.amplitude.abs() < sp.mean) {
            return Err(Error::Config("speed profile must stay positive (|amplitude| < mean)".into()));
        }
        let q = &self.quality;
        if q.baseline().iter().any(|d| !(*d > 0.0)) || !(q.dop_jitter >= 0.0) {
            return Err(Error::Config("baseline DOPs must be positive and dop_jitter non-negative".into()));
        }
        for (i, b) in self.bridges.iter().enumerate() {
            if !(b.half_width > 0.0) || !(b.severity > 1.0) || !(0.0..=1.0).contains(&b.dop_coupling) {
                return Err(Error::Config(format!(
                    "bridge {i}: need half_width > 0, severity > 1, dop_coupling in [0, 1]"
                )));
            }
            if !(0.0..length).contains(&b.center_s) {
                return Err(Error::Config(format!("bridge {i}: center_s outside [0, {length})")));
            }
        }
        for i in 0..self.bridges.len() {
            for j in i + 1..self.bridges.len() {
                let (a, b) = (&self.bridges[i], &self.bridges[j]);
                let reach = a.half_width + b.half_width + 2.0 * self.ramp;
                if track_distance(a.center_s, b.center_s, length) < reach {
                    return Err(Error::Config(format!(
                        "bridges {i} and {j} overlap (centers {} and {})",
                        a.center_s, b.center_s
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: WorldConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Covariance inflation `1 + Σ_b (severity_b − 1) · bump_b(s)`.
    pub fn inflation(&self, s: f64) -> f64 {
        1.0 + self
            .bridges
            .iter()
            .map(|b| (b.severity - 1.0) * self.bump(b, s))
            .sum::<f64>()
    }

    /// 1 on the footprint, raised-cosine ramp down to 0 over `ramp` meters.
    pub fn bump(&self, b: &Bridge, s: f64) -> f64 {
        raised_cosine(track_distance(s, b.center_s, self.track.length), b.half_width, self.ramp)
    }

    /// True when `s` lies in a bridge footprint or within `exit` meters
    /// past its far edge in the direction of travel.
    pub fn in_bridge_zone(&self, s: f64, exit: f64) -> bool {
        let l = self.track.length;
        self.bridges.iter().any(|b| {
            let from_entry = (s - (b.center_s - b.half_width)).rem_euclid(l);
            from_entry <= 2.0 * b.half_width + exit
        })
    }
}

/// Shortest distance between two positions on a loop of the given length.
pub fn track_distance(a: f64, b: f64, length: f64) -> f64 {
    let d = (a - b).rem_euclid(length);
    d.min(length - d)
}

fn raised_cosine(dist: f64, half_width: f64, ramp: f64) -> f64 {
    if dist <= half_width {
        1.0
    } else if dist >= half_width + ramp {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (dist - half_width) / ramp).cos())
    }
}

/// Ground-truth residual covariance at arc length `s`.
pub fn truth_cov(s: f64, cfg: &WorldConfig) -> Result<SpdMatrix> {
    cfg.base_cov()?.scaled(cfg.inflation(s))
}

/// Receiver quality at `s`.
///
/// DOPs are `baseline · (1 + Σ_b coupling_b · bump_b · ln severity_b) · exp(σ|z|)`;
/// the folded jitter keeps them at or above the open-sky baseline.
pub fn synth_quality<R: Rng + ?Sized>(s: f64, cfg: &WorldConfig, rng: &mut R) -> GnssQuality {
    let q = &cfg.quality;
    let mut dop_gain = 1.0;
    let mut sat_loss = 0.0;
    for b in &cfg.bridges {
        let coupled = b.dop_coupling * cfg.bump(b, s);
        dop_gain += coupled * b.severity.ln();
        sat_loss += coupled;
    }
    let mut dops = q.baseline();
    for d in &mut dops {
        let z: f64 = rng.sample(StandardNormal);
        *d *= dop_gain * (q.dop_jitter * z.abs()).exp();
    }
    let j = q.sat_jitter as i64;
    let jitter = if j > 0 { rng.random_range(-j..=j) } else { 0 };
    let drop = (sat_loss.min(1.0) * q.sat_drop as f64).floor() as i64;
    let sats = (q.sat_count as i64 - drop + jitter).max(4);
    GnssQuality {
        gdop: dops[0],
        hdop: dops[1],
        vdop: dops[2],
        pdop: dops[3],
        sat_count: sats as u32,
    }
}

/// Drives `laps` laps from `s = 0` at the configured rate.
///
/// Positions are exact points on the track polyline; residuals are drawn
/// as `ε = C z` with `C` the Cholesky factor of the true covariance.
pub fn gen_session(cfg: &WorldConfig, laps: usize, seed: u64) -> Result<Vec<SessionRecord>> {
    if laps == 0 {
        return Err(Error::InvalidArgument("laps must be at least 1".into()));
    }
    cfg.validate()?;
    let track = cfg.track.build()?;
    let base = cfg.base_cov()?.cholesky()?;
    let length = track.total_length();
    let dt = cfg.delta_t();
    let end = laps as f64 * length;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut s = 0.0;
    let mut k = 0u64;
    while s < end {
        let wrapped = track.wrap(s);
        let quality = synth_quality(wrapped, cfg, &mut rng);
        let factor = cfg.inflation(wrapped);
        let z: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let e = base.mul_lower(&z);
        let sd = factor.sqrt();
        out.push(SessionRecord {
            t: k as f64 * dt,
            position: track.point_at(wrapped),
            quality,
            residual: [sd * e[0], sd * e[1], sd * e[2]],
            truth_cov: Some(cfg.base_cov()?.scaled(factor)?),
        });
        // Midpoint rule on ds/dt = v(s).
        let v_mid = cfg.speed.speed(s + 0.5 * dt * cfg.speed.speed(s, length), length);
        s += dt * v_mid;
        k += 1;
    }
    Ok(out)
}
