//! Constant-velocity Kalman filter fed GNSS fixes with a chosen measurement
//! covariance.

use std::io::Write;

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SessionRecord;
use crate::spd::SpdMatrix;
use crate::world::{gen_session, WorldConfig};

/// Acceleration densities tried by [`tune_on_open_sky`], m²/s³.
pub const PROCESS_NOISE_GRID: [f64; 8] = [1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0];

/// Covariance trace above which a run is flagged as diverged, m².
pub const DIVERGENCE_TRACE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EkfConfig {
    /// Spectral density of the white acceleration driving the velocity, m²/s³.
    pub accel_psd: f64,
    pub init_pos_std: f64,
    pub init_vel_std: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            accel_psd: 50.0,
            init_pos_std: 1.0,
            init_vel_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfStep {
    pub t: f64,
    pub estimate: [f64; 3],
    pub truth: [f64; 3],
    pub measurement: [f64; 3],
    pub trace_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfReport {
    pub rmse: f64,
    /// RMSE over the steps flagged as bridge zone; `NaN` without any.
    pub rmse_zone: f64,
    pub zone_steps: usize,
    /// Largest position correction of a single update, m.
    pub max_jump: f64,
    /// Largest normalized innovation squared `νᵀS⁻¹ν`.
    pub max_nis: f64,
    pub diverged: bool,
    pub steps: Vec<EkfStep>,
}

impl EkfReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,est_x,est_y,est_z,true_x,true_y,true_z,meas_x,meas_y,meas_z,trace_r")?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                s.t,
                s.estimate[0],
                s.estimate[1],
                s.estimate[2],
                s.truth[0],
                s.truth[1],
                s.truth[2],
                s.measurement[0],
                s.measurement[1],
                s.measurement[2],
                s.trace_r
            )?;
        }
        Ok(())
    }
}

fn to_matrix3(m: &SpdMatrix) -> Result<Matrix3<f64>> {
    if m.dim() != 3 {
        return Err(Error::InvalidArgument("measurement covariance must be 3 × 3".into()));
    }
    Ok(Matrix3::from_row_slice(m.as_slice()))
}

/// Filters `records` with measurement `y_k = p_k − ε_k` and covariance
/// `covs[k]`.
///
/// The state is position and velocity; updates use the Joseph form. `zone`
/// marks the steps that count towards the bridge-zone RMSE. `seed` draws the
/// initial estimate around the true start.
pub fn ekf_run(
    records: &[SessionRecord],
    covs: &[SpdMatrix],
    zone: &[bool],
    cfg: &EkfConfig,
    seed: u64,
) -> Result<EkfReport> {
    let t = records.len();
    if t < 2 {
        return Err(Error::InvalidArgument("the filter needs at least 2 records".into()));
    }
    if covs.len() != t || zone.len() != t {
        return Err(Error::InvalidArgument(format!(
            "{t} records but {} covariances and {} zone flags",
            covs.len(),
            zone.len()
        )));
    }
    let dt = records[1].t - records[0].t;
    let i3 = Matrix3::<f64>::identity();
    let mut f = Matrix6::<f64>::identity();
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(i3 * dt));
    let q = cfg.accel_psd;
    let mut qp = Matrix6::<f64>::zeros();
    qp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(i3 * (q * dt.powi(3) / 3.0)));
    qp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(i3 * (q * dt * dt / 2.0)));
    qp.fixed_view_mut::<3, 3>(3, 0).copy_from(&(i3 * (q * dt * dt / 2.0)));
    qp.fixed_view_mut::<3, 3>(3, 3).copy_from(&(i3 * (q * dt)));
    let mut h = Matrix3x6::<f64>::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&i3);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |std: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        std * z
    };
    let p0 = Vector3::from(records[0].position);
    let v0 = (Vector3::from(records[1].position) - p0) / dt;
    let mut x = Vector6::<f64>::zeros();
    for i in 0..3 {
        x[i] = p0[i] + noise(cfg.init_pos_std);
        x[3 + i] = v0[i] + noise(cfg.init_vel_std);
    }
    let mut p = Matrix6::<f64>::zeros();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(&(i3 * cfg.init_pos_std.powi(2)));
    p.fixed_view_mut::<3, 3>(3, 3).copy_from(&(i3 * cfg.init_vel_std.powi(2)));

    let mut steps = Vec::with_capacity(t);
    let (mut sq, mut sq_zone, mut zone_steps) = (0.0, 0.0, 0usize);
    let (mut max_jump, mut max_nis, mut diverged) = (0.0f64, 0.0f64, false);
    let eye6 = Matrix6::<f64>::identity();
    for (k, rec) in records.iter().enumerate() {
        if k > 0 {
            x = f * x;
            p = f * p * f.transpose() + qp;
        }
        let r = to_matrix3(&covs[k])?;
        let truth = Vector3::from(rec.position);
        let y = truth - Vector3::from(rec.residual);
        let nu = y - h * x;
        let s = h * p * h.transpose() + r;
        let s_chol = s.cholesky().ok_or_else(|| {
            Error::NumericalDomain(format!("innovation covariance at step {k} is not positive definite"))
        })?;
        let gain = p * h.transpose() * s_chol.inverse();
        let dx = gain * nu;
        x += dx;
        let a = eye6 - gain * h;
        p = a * p * a.transpose() + gain * r * gain.transpose();
        p = (p + p.transpose()) * 0.5;

        max_jump = max_jump.max(dx.fixed_rows::<3>(0).norm());
        max_nis = max_nis.max(nu.dot(&s_chol.solve(&nu)));
        if !(p.trace() <= DIVERGENCE_TRACE) {
            diverged = true;
        }
        let est = Vector3::new(x[0], x[1], x[2]);
        let e2 = (est - truth).norm_squared();
        sq += e2;
        if zone[k] {
            sq_zone += e2;
            zone_steps += 1;
        }
        steps.push(EkfStep {
            t: rec.t,
            estimate: [est[0], est[1], est[2]],
            truth: rec.position,
            measurement: [y[0], y[1], y[2]],
            trace_r: r.trace(),
        });
    }
    Ok(EkfReport {
        rmse: (sq / t as f64).sqrt(),
        rmse_zone: if zone_steps > 0 {
            (sq_zone / zone_steps as f64).sqrt()
        } else {
            f64::NAN
        },
        zone_steps,
        max_jump,
        max_nis,
        diverged,
        steps,
    })
}

/// Picks the acceleration density in `grid` with the lowest RMSE.
///
/// Meant for open-sky data with its true covariance; the result is then held
/// fixed for every measurement model.
pub fn tune_process_noise(records: &[SessionRecord], covs: &[SpdMatrix], grid: &[f64], seed: u64) -> Result<f64> {
    let zone = vec![false; records.len()];
    let mut best = (f64::INFINITY, None);
    for &q in grid {
        let cfg = EkfConfig {
            accel_psd: q,
            ..EkfConfig::default()
        };
        let rmse = ekf_run(records, covs, &zone, &cfg, seed)?.rmse;
        if rmse < best.0 {
            best = (rmse, Some(q));
        }
    }
    best.1
        .ok_or_else(|| Error::InvalidArgument("empty process-noise grid".into()))
}

/// Tunes the acceleration density on one lap of `world` with its bridges
/// removed, filtering with the true covariance.
pub fn tune_on_open_sky(world: &WorldConfig, seed: u64) -> Result<f64> {
    let sky = WorldConfig {
        bridges: Vec::new(),
        ..world.clone()
    };
    let recs = gen_session(&sky, 1, seed)?;
    let covs = recs
        .iter()
        .map(|r| r.truth_cov.clone())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::InvalidArgument("generated session lacks true covariance".into()))?;
    tune_process_noise(&recs, &covs, &PROCESS_NOISE_GRID, seed)
}
