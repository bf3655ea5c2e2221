//! Covariance dynamics `R_{k+1} = A_d R_k A_dᵀ + Q_k` with a diagonal,
//! spectrally constrained `A`.

pub mod export;
pub mod fft;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::head::logistic;
use crate::spd::{frob_dist_raw, SpdMatrix};

pub use export::write_trajectory_csv;

/// Default maximum log-det contraction rate, 1/s.
pub const DEFAULT_R_MAX: f64 = 6.0;
/// Default GNSS period (20 Hz).
pub const DEFAULT_DELTA_T: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralConfig {
    pub n: usize,
    /// Maximum admissible contraction rate of `log det R`, 1/s.
    pub r_max: f64,
    /// Most negative admissible eigenvalue, 1/s.
    pub lambda_min: f64,
    pub delta_t: f64,
    /// Accept `lambda_min` below `−r_max/(2n)`, giving up the smoothness bound.
    #[serde(default)]
    pub allow_unbounded: bool,
}

impl SpectralConfig {
    /// The tightest configuration that keeps the smoothness bound:
    /// `lambda_min = −r_max/(2n)`.
    pub fn bounded(n: usize, r_max: f64, delta_t: f64) -> Result<Self> {
        let cfg = SpectralConfig {
            n,
            r_max,
            lambda_min: -r_max / (2.0 * n as f64),
            delta_t,
            allow_unbounded: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lambda_bound(&self) -> f64 {
        -self.r_max / (2.0 * self.n as f64)
    }

    /// True when `lambda` keeps `d/dt log det R ≥ −r_max`.
    pub fn within_bound(&self, lambda: f64) -> bool {
        lambda >= self.lambda_bound()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be positive".into()));
        }
        if !(self.r_max > 0.0) || !self.r_max.is_finite() {
            return Err(Error::InvalidParameter("r_max must be positive".into()));
        }
        if !(self.delta_t > 0.0) || !self.delta_t.is_finite() {
            return Err(Error::InvalidParameter("delta_t must be positive".into()));
        }
        if !(self.lambda_min < 0.0) || !self.lambda_min.is_finite() {
            return Err(Error::InvalidParameter("lambda_min must be negative".into()));
        }
        if !self.allow_unbounded && !self.within_bound(self.lambda_min) {
            return Err(Error::InvalidParameter(format!(
                "lambda_min {} is below the smoothness bound {} (set allow_unbounded to override)",
                self.lambda_min,
                self.lambda_bound()
            )));
        }
        Ok(())
    }
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig::bounded(3, DEFAULT_R_MAX, DEFAULT_DELTA_T).expect("defaults are valid")
    }
}

/// Continuous eigenvalues of `A` and their discrete counterparts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSet {
    pub lambdas: Vec<f64>,
    pub lambdas_d: Vec<f64>,
    pub delta_t: f64,
}

impl EigenSet {
    /// Eigenvalues given directly, e.g. for a λ sweep.
    pub fn from_lambdas(lambdas: &[f64], delta_t: f64) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::InvalidArgument("no eigenvalues".into()));
        }
        if let Some(l) = lambdas.iter().find(|l| !(**l < 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(format!("eigenvalue {l} must be negative")));
        }
        if !(delta_t > 0.0) {
            return Err(Error::InvalidArgument("delta_t must be positive".into()));
        }
        Ok(EigenSet {
            lambdas: lambdas.to_vec(),
            lambdas_d: lambdas.iter().map(|l| (l * delta_t).exp()).collect(),
            delta_t,
        })
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    /// Decay margin `μ = −max λᵢ` of the contraction bound.
    pub fn mu(&self) -> f64 {
        -self.lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_lambda_d(&self) -> f64 {
        self.lambdas_d.iter().copied().fold(0.0, f64::max)
    }
}

/// `λᵢ = lambda_min · logistic(θᵢ)`, `λ_{d,i} = exp(λᵢ Δt)`.
pub fn spectral_map(theta: &[f64], cfg: &SpectralConfig) -> EigenSet {
    let lambdas: Vec<f64> = theta.iter().map(|t| cfg.lambda_min * logistic(*t)).collect();
    let lambdas_d = lambdas.iter().map(|l| (l * cfg.delta_t).exp()).collect();
    EigenSet {
        lambdas,
        lambdas_d,
        delta_t: cfg.delta_t,
    }
}

/// `∂λ_{d,i}/∂θᵢ`.
pub fn spectral_map_derivative(theta: &[f64], cfg: &SpectralConfig) -> Vec<f64> {
    let eig = spectral_map(theta, cfg);
    theta
        .iter()
        .zip(&eig.lambdas_d)
        .map(|(t, ld)| {
            let s = logistic(*t);
            ld * cfg.delta_t * cfg.lambda_min * s * (1.0 - s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovTrajectory {
    pub delta_t: f64,
    pub mats: Vec<SpdMatrix>,
    /// `None` for models without covariance dynamics.
    pub eigen: Option<EigenSet>,
    pub source: String,
}

impl CovTrajectory {
    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mats.first().map_or(0, SpdMatrix::dim)
    }
}

fn check_sequence(qd: &[SpdMatrix], eig: &EigenSet) -> Result<usize> {
    let n = eig.dim();
    if let Some((k, q)) = qd.iter().enumerate().find(|(_, q)| q.dim() != n) {
        return Err(Error::InvalidArgument(format!(
            "Qd[{k}] is {}x{0}, eigenvalues are for dimension {n}",
            q.dim()
        )));
    }
    if let Some(l) = eig.lambdas_d.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(Error::InvalidArgument(format!("discrete eigenvalue {l} outside (0, 1)")));
    }
    Ok(n)
}

fn flatten(qd: &[SpdMatrix]) -> Vec<f64> {
    qd.iter().flat_map(|q| q.as_slice().iter().copied()).collect()
}

/// One step of the diagonal recursion on raw row-major storage.
pub(crate) fn seq_step(n: usize, r: &[f64], q: &[f64], lambdas_d: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = lambdas_d[i] * lambdas_d[j] * r[i * n + j] + q[i * n + j];
        }
    }
}

/// Sequential recursion over raw storage, returning `R_0 … R_T`.
pub fn propagate_seq_raw(n: usize, r0: &[f64], qd: &[f64], lambdas_d: &[f64]) -> Vec<f64> {
    let t = qd.len() / (n * n);
    let nn = n * n;
    let mut out = vec![0.0; (t + 1) * nn];
    out[..nn].copy_from_slice(r0);
    for k in 0..t {
        let (done, rest) = out.split_at_mut((k + 1) * nn);
        seq_step(n, &done[k * nn..], &qd[k * nn..(k + 1) * nn], lambdas_d, &mut rest[..nn]);
    }
    out
}

fn wrap(n: usize, raw: &[f64], what: &str) -> Result<Vec<SpdMatrix>> {
    raw.chunks(n * n)
        .enumerate()
        .map(|(k, m)| {
            SpdMatrix::new(n, m.to_vec()).map_err(|e| {
                Error::NumericalDomain(format!("{what} step {k} is not positive definite: {e}"))
            })
        })
        .collect()
}

/// `R_{k+1} = Λ_d R_k Λ_d + Q_k`, returning `|Qd| + 1` matrices starting at `R0`.
pub fn propagate_seq(r0: &SpdMatrix, qd: &[SpdMatrix], eig: &EigenSet) -> Result<CovTrajectory> {
    let n = check_sequence(qd, eig)?;
    if r0.dim() != n {
        return Err(Error::InvalidArgument("R0 dimension mismatch".into()));
    }
    let raw = propagate_seq_raw(n, r0.as_slice(), &flatten(qd), &eig.lambdas_d);
    Ok(CovTrajectory {
        delta_t: eig.delta_t,
        mats: wrap(n, &raw, "propagate_seq")?,
        eigen: Some(eig.clone()),
        source: "seq".into(),
    })
}

/// The sequential recursion from `R0 = 0`, returning `R̃_1 … R̃_T` (the zero
/// start itself is not positive definite and is dropped).
pub fn propagate_seq_zero(qd: &[SpdMatrix], eig: &EigenSet) -> Result<CovTrajectory> {
    let n = check_sequence(qd, eig)?;
    if qd.is_empty() {
        return Err(Error::InvalidArgument("empty Qd sequence".into()));
    }
    let raw = propagate_seq_raw(n, &vec![0.0; n * n], &flatten(qd), &eig.lambdas_d);
    Ok(CovTrajectory {
        delta_t: eig.delta_t,
        mats: wrap(n, &raw[n * n..], "propagate_seq")?,
        eigen: Some(eig.clone()),
        source: "seq".into(),
    })
}

/// Unrolled recursion by FFT convolution from a zero initial state,
/// returning `R̃_1 … R̃_T`.
pub fn propagate_fft(qd: &[SpdMatrix], eig: &EigenSet) -> Result<CovTrajectory> {
    let n = check_sequence(qd, eig)?;
    if qd.is_empty() {
        return Err(Error::InvalidArgument("empty Qd sequence".into()));
    }
    let raw = fft::convolve_raw(n, &flatten(qd), &eig.lambdas_d);
    Ok(CovTrajectory {
        delta_t: eig.delta_t,
        mats: wrap(n, &raw, "propagate_fft")?,
        eigen: Some(eig.clone()),
        source: "fft".into(),
    })
}

/// `(logdet R_{k+1} − logdet R_k) / Δt` for each consecutive pair.
pub fn logdet_rate(traj: &CovTrajectory) -> Result<Vec<f64>> {
    if traj.len() < 2 {
        return Err(Error::InvalidArgument("rate needs at least two matrices".into()));
    }
    if !(traj.delta_t > 0.0) {
        return Err(Error::InvalidArgument("trajectory has no positive time step".into()));
    }
    let logdets = traj.mats.iter().map(SpdMatrix::logdet).collect::<Result<Vec<_>>>()?;
    Ok(rates_from_logdets(&logdets, traj.delta_t))
}

pub(crate) fn rates_from_logdets(logdets: &[f64], delta_t: f64) -> Vec<f64> {
    logdets.windows(2).map(|w| (w[1] - w[0]) / delta_t).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    /// Index pairs `(a, b)` with `a < b` into the initialization list.
    pub pairs: Vec<(usize, usize)>,
    /// `distances[p][k] = ‖R_a(k) − R_b(k)‖_F` for pair `p`.
    pub distances: Vec<Vec<f64>>,
    /// Slowest fitted per-step slope of `ln ‖ΔR_k‖` over all pairs.
    pub fitted_slope: f64,
    /// `2 · ln(max λ_d)`.
    pub expected_slope: f64,
}

impl ContractionReport {
    pub fn final_max_distance(&self) -> f64 {
        self.distances
            .iter()
            .filter_map(|d| d.last().copied())
            .fold(0.0, f64::max)
    }

    pub fn slope_rel_error(&self) -> f64 {
        ((self.fitted_slope - self.expected_slope) / self.expected_slope).abs()
    }
}

/// Least-squares slope of `y` against its index.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Propagates every initialization under the same `Qd` and measures how fast
/// the trajectories merge.
///
/// The slope is fitted on the later half of the steps whose gap is still
/// above round-off (`1e3·ε` relative to the size of `R`), where the slowest
/// channel dominates. Pairs that start identical contribute no slope.
pub fn contraction_check(
    r0_set: &[SpdMatrix],
    qd: &[SpdMatrix],
    eig: &EigenSet,
) -> Result<ContractionReport> {
    if r0_set.len() < 2 {
        return Err(Error::InvalidArgument("need at least two initializations".into()));
    }
    let n = check_sequence(qd, eig)?;
    let q = flatten(qd);
    let trajs: Vec<Vec<f64>> = r0_set
        .iter()
        .map(|r0| {
            if r0.dim() != n {
                return Err(Error::InvalidArgument("R0 dimension mismatch".into()));
            }
            Ok(propagate_seq_raw(n, r0.as_slice(), &q, &eig.lambdas_d))
        })
        .collect::<Result<_>>()?;
    let nn = n * n;
    let steps = qd.len() + 1;
    let scale = trajs
        .iter()
        .flat_map(|t| t.chunks(nn).map(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .fold(1.0, f64::max);
    let floor = 1e3 * f64::EPSILON * scale;

    let mut pairs = Vec::new();
    let mut distances = Vec::new();
    let mut slopes = Vec::new();
    for a in 0..trajs.len() {
        for b in (a + 1)..trajs.len() {
            let d: Vec<f64> = (0..steps)
                .map(|k| frob_dist_raw(&trajs[a][k * nn..(k + 1) * nn], &trajs[b][k * nn..(k + 1) * nn]))
                .collect();
            let valid = d.iter().take_while(|v| **v > floor).count();
            if valid >= 4 {
                let start = valid / 2;
                let x: Vec<f64> = (start..valid).map(|k| k as f64).collect();
                let y: Vec<f64> = d[start..valid].iter().map(|v| v.ln()).collect();
                slopes.push(fit_slope(&x, &y));
            }
            pairs.push((a, b));
            distances.push(d);
        }
    }
    let fitted_slope = slopes.into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(ContractionReport {
        pairs,
        distances,
        fitted_slope,
        expected_slope: 2.0 * eig.max_lambda_d().ln(),
    })
}
