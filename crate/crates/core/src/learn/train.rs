//! The optimizer loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::objective::{InitialCondition, Objective, WindowLoss};
use super::optim::{Adam, AdamConfig};
use super::{empirical_covariance, segments, LossBreakdown, Mode, PreparedSession, Segment};
use crate::dynamics::SpectralConfig;
use crate::error::{Error, Result};
use crate::net::{CoreModelParams, ModelConfig};
use crate::spd::SpdMatrix;

/// Multiplier on the empirical residual covariance used as the deployment `R_0`.
pub const R0_INFLATION: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Timesteps per unrolled window.
    pub batch_length: usize,
    /// Windows per optimizer step.
    pub segments_per_batch: usize,
    /// Smoothness-penalty weight; `None` takes the mode default.
    pub lambda_weight: Option<f64>,
    pub seed: u64,
    /// Fraction of sessions held out when the caller asks for a split.
    pub eval_fraction: f64,
    pub init: InitialCondition,
    pub optimizer: AdamConfig,
    pub spectral: SpectralConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Lace,
            epochs: 100,
            batch_length: 512,
            segments_per_batch: 4,
            lambda_weight: None,
            seed: 0,
            eval_fraction: 0.2,
            init: InitialCondition::Stationary,
            optimizer: AdamConfig::default(),
            spectral: SpectralConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lambda_weight(&self) -> f64 {
        self.lambda_weight.unwrap_or_else(|| self.mode.default_lambda_weight())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_length < 2 || self.segments_per_batch == 0 {
            return Err(Error::InvalidParameter(
                "batch_length must be at least 2 and segments_per_batch positive".into(),
            ));
        }
        if !(self.lambda_weight() >= 0.0) {
            return Err(Error::InvalidParameter("lambda_weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::InvalidParameter("eval_fraction must be in [0, 1)".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::InvalidParameter("invalid optimizer settings".into()));
        }
        if self.spectral.n != self.model.n {
            return Err(Error::InvalidParameter("spectral and model dimensions differ".into()));
        }
        self.spectral.validate()?;
        self.model.validate()
    }
}

/// Seeded split of `count` sessions into `(train, eval)` index lists.
pub fn split_sessions(count: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_eval = (count as f64 * eval_fraction).round() as usize;
    if count >= 2 && eval_fraction > 0.0 {
        n_eval = n_eval.clamp(1, count - 1);
    } else {
        n_eval = 0;
    }
    let eval = idx.split_off(count - n_eval);
    let mut train = idx;
    train.sort_unstable();
    let mut eval = eval;
    eval.sort_unstable();
    (train, eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Per-step means over the training windows.
    pub train: LossBreakdown,
    pub eval: Option<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters of the epoch with the lowest eval loss (train loss without
    /// an eval split). Equal to the initial parameters when `epochs == 0`.
    pub params: CoreModelParams,
    pub final_params: CoreModelParams,
    pub best_epoch: usize,
    pub trace: Vec<EpochLoss>,
    pub objective: Objective,
    /// Deployment initial covariance: `R0_INFLATION ×` the training residual covariance.
    pub r0: SpdMatrix,
}

fn sum_losses(parts: &[WindowLoss], lambda_weight: f64) -> LossBreakdown {
    let steps: usize = parts.iter().map(|p| p.steps).sum();
    let nll: f64 = parts.iter().map(|p| p.nll).sum();
    let smooth: f64 = parts.iter().map(|p| p.smooth).sum();
    LossBreakdown::new(nll, smooth, lambda_weight).per_step(steps)
}

/// Loss over every window, without gradients.
pub fn evaluate_windows(
    obj: &Objective,
    params: &CoreModelParams,
    sessions: &[PreparedSession],
    segs: &[Segment],
) -> Result<LossBreakdown> {
    let parts = segs
        .par_iter()
        .map(|s| obj.window(params, &sessions[s.session], s.start, s.len, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_losses(&parts, obj.lambda_weight))
}

fn divergence(epoch: usize, step: usize, what: &str, params: &CoreModelParams) -> Error {
    let norms: Vec<String> = params
        .norms()
        .into_iter()
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect();
    Error::Divergence {
        epoch,
        step,
        detail: format!("{what}; parameter norms: {}", norms.join(", ")),
    }
}

pub fn train(train: &[PreparedSession], eval: &[PreparedSession], cfg: &TrainConfig) -> Result<TrainResult> {
    train_with_progress(train, eval, cfg, |_| {})
}

/// [`train`] with a callback after every epoch (including the initial
/// evaluation at epoch 0).
pub fn train_with_progress(
    train: &[PreparedSession],
    eval: &[PreparedSession],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochLoss),
) -> Result<TrainResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let delta_t = train[0].delta_t;
    if let Some(s) = train.iter().chain(eval).find(|s| (s.delta_t - delta_t).abs() > 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "sessions mix sampling periods {delta_t} and {}",
            s.delta_t
        )));
    }
    let emp = empirical_covariance(train)?;
    let mut spectral = cfg.spectral.clone();
    spectral.delta_t = delta_t;
    let obj = Objective {
        mode: cfg.mode,
        spectral,
        lambda_weight: cfg.lambda_weight(),
        init: cfg.init,
        scale: emp.trace() / 3.0,
    };

    let mut params = CoreModelParams::init(&cfg.model, cfg.seed)?;
    let train_segs = segments(train, cfg.batch_length);
    let eval_segs = segments(eval, cfg.batch_length);
    let eval_loss = |p: &CoreModelParams| -> Result<Option<LossBreakdown>> {
        if eval_segs.is_empty() {
            Ok(None)
        } else {
            evaluate_windows(&obj, p, eval, &eval_segs).map(Some)
        }
    };

    let initial = EpochLoss {
        epoch: 0,
        train: evaluate_windows(&obj, &params, train, &train_segs)?,
        eval: eval_loss(&params)?,
    };
    progress(&initial);
    let mut trace = vec![initial];
    let mut best: Option<(f64, usize, CoreModelParams)> = None;

    let mut adam = Adam::new(cfg.optimizer.clone(), params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order = train_segs.clone();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_parts = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.segments_per_batch) {
            let steps: usize = batch.iter().map(|s| s.len).sum();
            let weight = 1.0 / steps as f64;
            let results = batch
                .par_iter()
                .map(|s| {
                    let mut g = params.zeros_like();
                    let l = obj.window(&params, &train[s.session], s.start, s.len, Some((&mut g, weight)))?;
                    Ok((l, g))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::NumericalDomain(msg) => divergence(epoch, step, &msg, &params),
                    other => other,
                })?;
            let mut grads = params.zeros_like();
            for (l, g) in results {
                grads.add_scaled(&g, 1.0);
                epoch_parts.push(l);
            }
            let batch_loss = sum_losses(&epoch_parts[epoch_parts.len() - batch.len()..], obj.lambda_weight);
            if !batch_loss.total.is_finite() || !grads.is_finite() {
                return Err(divergence(epoch, step, "non-finite loss or gradient", &params));
            }
            if !cfg.model.learnable_keys {
                grads.attention.key_angles.iter_mut().for_each(|g| *g = 0.0);
            }
            adam.step(&mut params, &grads);
            params.attention.temperature = params.attention.temperature.max(cfg.model.temperature_floor);
            step += 1;
            if !params.is_finite() {
                return Err(divergence(epoch, step, "non-finite parameters after update", &params));
            }
        }
        let record = EpochLoss {
            epoch,
            train: sum_losses(&epoch_parts, obj.lambda_weight),
            eval: eval_loss(&params).map_err(|e| match e {
                Error::NumericalDomain(msg) => divergence(epoch, step, &msg, &params),
                other => other,
            })?,
        };
        progress(&record);
        let score = record.eval.unwrap_or(record.train).total;
        if !score.is_finite() {
            return Err(divergence(epoch, step, "non-finite epoch loss", &params));
        }
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, params.clone()));
        }
        trace.push(record);
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params.clone()),
    };
    Ok(TrainResult {
        params: best_params,
        final_params: params,
        best_epoch,
        trace,
        objective: obj,
        r0: emp.scaled(R0_INFLATION)?,
    })
}

/// `epoch,split,nll,smooth,total` rows.
pub fn write_loss_csv<W: Write>(trace: &[EpochLoss], mut out: W) -> Result<()> {
    writeln!(out, "epoch,split,nll,smooth,total")?;
    for e in trace {
        let rows = std::iter::once(("train", &e.train)).chain(e.eval.as_ref().map(|l| ("eval", l)));
        for (split, l) in rows {
            writeln!(out, "{},{split},{},{},{}", e.epoch, l.nll, l.smooth, l.total)?;
        }
    }
    Ok(())
}
