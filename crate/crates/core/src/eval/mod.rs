//! Baseline covariance models, likelihood evaluation and the λ sweep.

pub mod ekf;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{contraction_check, propagate_seq, ContractionReport, EigenSet, SpectralConfig};
use crate::error::{Error, Result};
use crate::learn::{empirical_covariance, Mode, Objective, PreparedSession};
use crate::net::checkpoint::Checkpoint;
use crate::net::CoreModelParams;
use crate::spd::{ldl_compose, quad_form, LdlParams, SpdMatrix};
use crate::world::{track_distance, WorldConfig};

pub use ekf::{ekf_run, tune_on_open_sky, tune_process_noise, EkfConfig, EkfReport, PROCESS_NOISE_GRID};

/// A measurement-covariance model evaluated over whole sessions.
pub trait CovModel: Sync {
    fn name(&self) -> &str;
    /// One SPD matrix per step, m².
    fn covariances(&self, session: &PreparedSession) -> Result<Vec<SpdMatrix>>;
}

/// `c · I₃` at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantModel {
    name: String,
    c: f64,
}

impl ConstantModel {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!("constant covariance needs c > 0, got {c}")));
        }
        Ok(ConstantModel {
            name: "constant".into(),
            c,
        })
    }

    /// Trace-matched to the empirical residual covariance of `train`.
    pub fn calibrate(train: &[PreparedSession]) -> Result<Self> {
        Self::new(empirical_covariance(train)?.trace() / 3.0)
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

impl CovModel for ConstantModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn covariances(&self, session: &PreparedSession) -> Result<Vec<SpdMatrix>> {
        let m = SpdMatrix::scaled_identity(3, self.c)?;
        Ok(vec![m; session.len()])
    }
}

/// Inflates `c` linearly with proximity to known bridge centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleConfig {
    pub c: f64,
    pub bridge_centers: Vec<f64>,
    pub influence_radius: f64,
    pub max_scale: f64,
    pub padding: f64,
    /// Distances wrap around a closed track of this length.
    #[serde(default)]
    pub track_length: Option<f64>,
}

impl BubbleConfig {
    /// Template for `world`: its bridge centers, a 25 m radius and 10 m of
    /// padding. `c` and `max_scale` are placeholders for calibration.
    pub fn for_world(world: &WorldConfig) -> Self {
        BubbleConfig {
            c: 1.0,
            bridge_centers: world.bridges.iter().map(|b| b.center_s).collect(),
            influence_radius: 25.0,
            max_scale: 2.0,
            padding: 10.0,
            track_length: Some(world.track.length),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !(self.influence_radius > 0.0) || !(self.padding >= 0.0) || !(self.max_scale > 1.0) {
            return Err(Error::InvalidArgument(
                "bubble model needs c > 0, influence_radius > 0, padding >= 0, max_scale > 1".into(),
            ));
        }
        Ok(())
    }

    /// `1 + (max_scale − 1) · max_b clamp(1 − d_b / (radius + padding), 0, 1)`.
    pub fn scale(&self, s: f64) -> f64 {
        let reach = self.influence_radius + self.padding;
        let tent = self
            .bridge_centers
            .iter()
            .map(|c| {
                let d = match self.track_length {
                    Some(l) => track_distance(s, *c, l),
                    None => (s - c).abs(),
                };
                (1.0 - d / reach).clamp(0.0, 1.0)
            })
            .fold(0.0, f64::max);
        1.0 + (self.max_scale - 1.0) * tent
    }

    pub fn covariance(&self, s: f64) -> Result<SpdMatrix> {
        SpdMatrix::scaled_identity(3, self.c * self.scale(s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BubbleModel {
    pub cfg: BubbleConfig,
}

impl BubbleModel {
    pub fn new(cfg: BubbleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(BubbleModel { cfg })
    }

    /// Grid search over `(c, max_scale)` minimizing the training NLL, with the
    /// bridge centers, radius and padding given.
    pub fn calibrate(train: &[PreparedSession], template: BubbleConfig) -> Result<Self> {
        let c0 = ConstantModel::calibrate(train)?.c;
        let c_grid: Vec<f64> = (-12..=4).map(|i| c0 * 2f64.powf(i as f64 / 2.0)).collect();
        let s_grid: Vec<f64> = (1..=28).map(|i| 2f64.powf(i as f64 / 2.0)).collect();
        let candidates: Vec<(f64, f64)> = c_grid
            .iter()
            .flat_map(|c| s_grid.iter().map(move |m| (*c, *m)))
            .collect();
        let scored = candidates
            .par_iter()
            .map(|&(c, max_scale)| {
                let cfg = BubbleConfig {
                    c,
                    max_scale,
                    ..template.clone()
                };
                let mut total = 0.0;
                for s in train {
                    for k in 0..s.len() {
                        let v = c * cfg.scale(s.arc[k]);
                        let e = s.residual(k);
                        total += 3.0 * v.ln() + (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]) / v;
                    }
                }
                (total, c, max_scale)
            })
            .collect::<Vec<_>>();
        let (_, c, max_scale) = scored
            .into_iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("non-empty grid");
        BubbleModel::new(BubbleConfig {
            c,
            max_scale,
            ..template
        })
    }
}

impl CovModel for BubbleModel {
    fn name(&self) -> &str {
        "bubble"
    }

    fn covariances(&self, session: &PreparedSession) -> Result<Vec<SpdMatrix>> {
        session.arc.iter().map(|s| self.cfg.covariance(*s)).collect()
    }
}

/// The generator's true covariance.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleModel;

impl CovModel for OracleModel {
    fn name(&self) -> &str {
        "oracle"
    }

    fn covariances(&self, session: &PreparedSession) -> Result<Vec<SpdMatrix>> {
        session
            .truth
            .clone()
            .ok_or_else(|| Error::InvalidArgument("session carries no true covariance".into()))
    }
}

/// A trained network, LACE or one-shot.
#[derive(Debug, Clone)]
pub struct LearnedModel {
    pub name: String,
    pub objective: Objective,
    pub params: CoreModelParams,
    /// Initial state of the recursion; `None` starts from the stationary point.
    pub r0: Option<SpdMatrix>,
}

impl LearnedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(LearnedModel {
            name: ckpt.mode.name().to_string(),
            objective: ckpt.objective(ckpt.mode.default_lambda_weight()),
            params: ckpt.params()?,
            r0: ckpt.r0.clone(),
        })
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn mode(&self) -> Mode {
        self.objective.mode
    }

    pub fn eigen(&self) -> EigenSet {
        self.objective.eigen(&self.params)
    }

    /// Covariances with every eigenvalue of `A` set to `lambda`.
    pub fn covariances_at(&self, session: &PreparedSession, lambda: f64) -> Result<Vec<SpdMatrix>> {
        let n = self.params.dim();
        let eig = EigenSet::from_lambdas(&vec![lambda; n], self.objective.spectral.delta_t)?;
        self.objective
            .covariances_with(&self.params, &session.features, self.r0.as_ref(), &eig)
    }
}

impl CovModel for LearnedModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn covariances(&self, session: &PreparedSession) -> Result<Vec<SpdMatrix>> {
        self.objective
            .covariances(&self.params, &session.features, self.r0.as_ref())
    }
}

/// One model's scores over a set of sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    /// Per-step NLL `log det R + εᵀR⁻¹ε`, averaged over every step.
    pub avg_loss: f64,
    /// Standard deviation across sessions (laps) of the per-session average.
    pub std: f64,
    /// Steps with `d/dt log det R < −r_max`.
    pub smoothness_violations: usize,
    pub min_logdet_rate: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_max: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, model: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "model,avg_loss,std,smoothness_violations,min_logdet_rate,steps")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.model, r.avg_loss, r.std, r.smoothness_violations, r.min_logdet_rate, r.steps
            )?;
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>12} {:>12} {:>11} {:>14}\n",
            "model", "avg loss", "std", "violations", "min rate"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<16} {:>12.4} {:>12.4} {:>11} {:>14.3}\n",
                r.model, r.avg_loss, r.std, r.smoothness_violations, r.min_logdet_rate
            ));
        }
        s
    }
}

/// Per-session sums for one model.
#[derive(Debug, Clone, Copy)]
struct SessionScore {
    nll: f64,
    steps: usize,
    violations: usize,
    min_rate: f64,
}

/// Summed NLL and the log-det rates of one covariance sequence.
pub fn score_covariances(covs: &[SpdMatrix], session: &PreparedSession) -> Result<(f64, Vec<f64>)> {
    if covs.len() != session.len() {
        return Err(Error::InvalidArgument(format!(
            "{} covariances for {} steps",
            covs.len(),
            session.len()
        )));
    }
    let mut nll = 0.0;
    let mut logdets = Vec::with_capacity(covs.len());
    for (k, r) in covs.iter().enumerate() {
        let ld = r
            .logdet()
            .map_err(|e| Error::NumericalDomain(format!("step {k}: {e}")))?;
        nll += ld + quad_form(r, &session.residual(k))?;
        logdets.push(ld);
    }
    let rates = logdets.windows(2).map(|w| (w[1] - w[0]) / session.delta_t).collect();
    Ok((nll, rates))
}

fn score_model(model: &dyn CovModel, sessions: &[PreparedSession], r_max: f64) -> Result<EvalRow> {
    let mut scores = sessions
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let covs = model.covariances(s).map_err(|e| tag(model, i, e))?;
            let (nll, rates) = score_covariances(&covs, s).map_err(|e| tag(model, i, e))?;
            Ok(SessionScore {
                nll,
                steps: s.len(),
                violations: rates.iter().filter(|r| **r < -r_max).count(),
                min_rate: rates.iter().copied().fold(f64::INFINITY, f64::min),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // Sum in a canonical order so that session order cannot change a bit.
    scores.sort_by(|a, b| a.nll.total_cmp(&b.nll).then(a.steps.cmp(&b.steps)));
    let steps: usize = scores.iter().map(|s| s.steps).sum();
    if steps == 0 {
        return Err(Error::InvalidArgument("no steps to evaluate".into()));
    }
    let avg_loss = scores.iter().map(|s| s.nll).sum::<f64>() / steps as f64;
    let means: Vec<f64> = scores.iter().map(|s| s.nll / s.steps.max(1) as f64).collect();
    let lap_mean = means.iter().sum::<f64>() / means.len() as f64;
    let std = if means.len() > 1 {
        (means.iter().map(|m| (m - lap_mean).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalRow {
        model: model.name().to_string(),
        avg_loss,
        std,
        smoothness_violations: scores.iter().map(|s| s.violations).sum(),
        min_logdet_rate: scores.iter().map(|s| s.min_rate).fold(f64::INFINITY, f64::min),
        steps,
    })
}

fn tag(model: &dyn CovModel, session: usize, e: Error) -> Error {
    match e {
        Error::NumericalDomain(msg) => {
            Error::NumericalDomain(format!("model {} on session {session}: {msg}", model.name()))
        }
        other => other,
    }
}

/// One row per model, in the given order.
pub fn evaluate(models: &[&dyn CovModel], sessions: &[PreparedSession], r_max: f64) -> Result<EvalReport> {
    let rows = models
        .iter()
        .map(|m| score_model(*m, sessions, r_max))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { r_max, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub avg_loss: f64,
    pub std: f64,
    pub min_logdet_rate: f64,
    pub smoothness_violations: usize,
    /// Mean of `trace R` over every step.
    pub mean_trace: f64,
    /// `λ ≥ −r_max / (2n)`, the region where the rate bound is guaranteed.
    pub within_bound: bool,
}

struct LambdaOverride<'a> {
    model: &'a LearnedModel,
    lambda: f64,
    name: String,
}

impl CovModel for LambdaOverride<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn covariances(&self, session: &PreparedSession) -> Result<Vec<SpdMatrix>> {
        self.model.covariances_at(session, self.lambda)
    }
}

/// Re-propagates the trained `Q` sequence with every eigenvalue set to each
/// `λ` in turn.
pub fn lambda_sweep(model: &LearnedModel, sessions: &[PreparedSession], lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    if model.mode() != Mode::Lace {
        return Err(Error::InvalidArgument("the λ sweep needs a LACE model".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l < 0.0)) {
        return Err(Error::InvalidArgument(format!("λ must be negative, got {l}")));
    }
    let spectral: &SpectralConfig = &model.objective.spectral;
    lambdas
        .iter()
        .map(|&lambda| {
            let o = LambdaOverride {
                model,
                lambda,
                name: format!("lambda={lambda}"),
            };
            let row = score_model(&o, sessions, spectral.r_max)?;
            let (sum, count) = sessions.iter().try_fold((0.0, 0usize), |(acc, n), s| {
                let covs = o.covariances(s)?;
                Ok::<_, Error>((acc + covs.iter().map(SpdMatrix::trace).sum::<f64>(), n + covs.len()))
            })?;
            Ok(SweepRow {
                lambda,
                avg_loss: row.avg_loss,
                std: row.std,
                min_logdet_rate: row.min_logdet_rate,
                smoothness_violations: row.smoothness_violations,
                mean_trace: sum / count.max(1) as f64,
                within_bound: spectral.within_bound(lambda),
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "lambda,avg_loss,std,min_logdet_rate,smoothness_violations,mean_trace,within_bound")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.lambda, r.avg_loss, r.std, r.min_logdet_rate, r.smoothness_violations, r.mean_trace, r.within_bound
        )?;
    }
    Ok(())
}

/// Random SPD matrix `L D Lᵀ` with `ln D ~ U(−2, 2) + ln scale` and
/// `L_ij ~ U(−1, 1)`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Result<SpdMatrix> {
    let lower = (0..n * (n - 1) / 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let diag = (0..n).map(|_| scale * rng.random_range(-2.0f64..2.0).exp()).collect();
    ldl_compose(&LdlParams::new(n, lower, diag)?)
}

#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub report: ContractionReport,
    /// `traces[i][k] = trace R_i(k)`, including the initial state.
    pub traces: Vec<Vec<f64>>,
}

/// Propagates `k` random initial covariances through the model's `Q`
/// sequence on one session, in m².
pub fn convergence(model: &LearnedModel, session: &PreparedSession, k: usize, seed: u64) -> Result<ConvergenceRun> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 initializations, got {k}")));
    }
    if model.mode() != Mode::Lace {
        return Err(Error::InvalidArgument("convergence needs a LACE model".into()));
    }
    let obj = &model.objective;
    let fwd = obj.forward(&model.params, &session.features);
    let n = model.params.dim();
    let qd = fwd
        .qd
        .chunks(n * n)
        .map(|m| SpdMatrix::new(n, m.iter().map(|x| x * obj.scale).collect()))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inits = (0..k)
        .map(|_| random_spd(&mut rng, n, 10.0 * obj.scale))
        .collect::<Result<Vec<_>>>()?;
    let traces = inits
        .iter()
        .map(|r0| Ok(propagate_seq(r0, &qd, &fwd.eigen)?.mats.iter().map(SpdMatrix::trace).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceRun {
        report: contraction_check(&inits, &qd, &fwd.eigen)?,
        traces,
    })
}

/// `step,trace_0..trace_{k−1},gap_a_b...` rows for a convergence run.
pub fn write_convergence_csv<W: Write>(run: &ConvergenceRun, mut out: W) -> Result<()> {
    let (report, traces) = (&run.report, &run.traces);
    let mut header = vec!["step".to_string()];
    header.extend((0..traces.len()).map(|i| format!("trace_{i}")));
    header.extend(report.pairs.iter().map(|(a, b)| format!("gap_{a}_{b}")));
    writeln!(out, "{}", header.join(","))?;
    let steps = report.distances.first().map_or(0, Vec::len);
    for k in 0..steps {
        let mut row = vec![k.to_string()];
        row.extend(traces.iter().map(|t| t.get(k).map_or(String::new(), |v| v.to_string())));
        row.extend(report.distances.iter().map(|d| d[k].to_string()));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
