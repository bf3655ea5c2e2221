//! Training: likelihood and smoothness objectives, the optimizer loop and
//! gradient verification.

pub mod gradcheck;
pub mod loss;
pub mod objective;
pub mod optim;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{arc_lengths, normalize_features, sampling_period, FeatureVector, ReferenceTrack, SessionRecord};
use crate::spd::SpdMatrix;

pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{nll_loss, nll_mean, smooth_loss, LossBreakdown};
pub use objective::{InitialCondition, Objective};
pub use optim::{Adam, AdamConfig};
pub use train::{train, write_loss_csv, EpochLoss, TrainConfig, TrainResult};

/// How the core-model output becomes the measurement covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// `Q_k` drives the spectrally constrained recursion.
    Lace,
    /// `Q_k` is used directly as `R_k`.
    Oneshot,
}

impl Mode {
    /// Default weight of the smoothness penalty: off for LACE, where it is
    /// inactive by construction.
    pub fn default_lambda_weight(self) -> f64 {
        match self {
            Mode::Lace => 0.0,
            Mode::Oneshot => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Lace => "lace",
            Mode::Oneshot => "oneshot",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lace" => Ok(Mode::Lace),
            "oneshot" | "oneshot_mlp" | "mlp" => Ok(Mode::Oneshot),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

/// A session mapped to model inputs and targets.
#[derive(Debug, Clone)]
pub struct PreparedSession {
    pub features: Vec<FeatureVector>,
    /// Row-major `T × 3`.
    pub residuals: Vec<f64>,
    pub delta_t: f64,
    /// Arc length in meters.
    pub arc: Vec<f64>,
    pub truth: Option<Vec<SpdMatrix>>,
}

impl PreparedSession {
    pub fn new(records: &[SessionRecord], track: &ReferenceTrack) -> Result<Self> {
        let delta_t = sampling_period(records)?;
        let features = normalize_features(records, track)?;
        let truth = records.iter().map(|r| r.truth_cov.clone()).collect::<Option<Vec<_>>>();
        Ok(PreparedSession {
            features,
            residuals: records.iter().flat_map(|r| r.residual).collect(),
            delta_t,
            arc: arc_lengths(records, track),
            truth,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn residual(&self, k: usize) -> [f64; 3] {
        [self.residuals[3 * k], self.residuals[3 * k + 1], self.residuals[3 * k + 2]]
    }
}

/// A contiguous window `[start, start + len)` of one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub session: usize,
    pub start: usize,
    pub len: usize,
}

/// Splits every session into `ceil(T / max_len)` windows of near-equal length.
pub fn segments(sessions: &[PreparedSession], max_len: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    for (idx, s) in sessions.iter().enumerate() {
        let t = s.len();
        if t == 0 {
            continue;
        }
        let count = t.div_ceil(max_len.max(1));
        let base = t / count;
        let extra = t % count;
        let mut start = 0;
        for c in 0..count {
            let len = base + usize::from(c < extra);
            out.push(Segment {
                session: idx,
                start,
                len,
            });
            start += len;
        }
    }
    out
}

/// Mean of `ε εᵀ` over all steps.
pub fn empirical_covariance(sessions: &[PreparedSession]) -> Result<SpdMatrix> {
    let mut acc = [0.0; 9];
    let mut count = 0usize;
    for s in sessions {
        for e in s.residuals.chunks(3) {
            for i in 0..3 {
                for j in 0..3 {
                    acc[i * 3 + j] += e[i] * e[j];
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no residuals".into()));
    }
    SpdMatrix::new(3, acc.iter().map(|a| a / count as f64).collect())
}
