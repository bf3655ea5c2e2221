//! The training objective over one window of a session, with its gradient.
//!
//! Residuals are measured in units of `sqrt(scale)`, so the network works
//! with covariances of order one; reported likelihoods are converted back to
//! physical units (`+ n·ln(scale)` per step).

use serde::{Deserialize, Serialize};

use super::loss::{nll_grad, smooth_from_rates, smooth_grad, step_terms};
use super::{Mode, PreparedSession};
use crate::dynamics::{fft, propagate_seq_raw, rates_from_logdets, spectral_map, spectral_map_derivative, EigenSet, SpectralConfig};
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::net::{model_backward, model_forward_cached, CoreModelParams, ModelCache};
use crate::spd::SpdMatrix;

/// State of the recursion at the start of a training window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialCondition {
    /// `R_0 = 0`: the free response is dropped entirely.
    Zero,
    /// `R_0 = Σ_j Λ^j Q_0 Λ^j`, the fixed point for a constant `Q_0`.
    Stationary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub mode: Mode,
    pub spectral: SpectralConfig,
    pub lambda_weight: f64,
    pub init: InitialCondition,
    /// Variance unit of the model output, m².
    pub scale: f64,
}

/// Sums over one window.
#[derive(Debug, Clone)]
pub struct WindowLoss {
    /// Physical-unit NLL summed over steps.
    pub nll: f64,
    pub smooth: f64,
    pub steps: usize,
    pub min_rate: f64,
    pub violations: usize,
}

/// Forward products for one window, in model units.
pub struct Forward {
    pub caches: Vec<ModelCache>,
    pub qd: Vec<f64>,
    pub r: Vec<f64>,
    pub eigen: EigenSet,
}

impl Objective {
    pub fn eigen(&self, params: &CoreModelParams) -> EigenSet {
        spectral_map(&params.spectral_theta, &self.spectral)
    }

    pub fn forward(&self, params: &CoreModelParams, features: &[FeatureVector]) -> Forward {
        let n = params.dim();
        let nn = n * n;
        let caches: Vec<ModelCache> = features.iter().map(|f| model_forward_cached(f, params)).collect();
        let mut qd = Vec::with_capacity(caches.len() * nn);
        for c in &caches {
            qd.extend_from_slice(c.matrix());
        }
        let eigen = self.eigen(params);
        let r = match self.mode {
            Mode::Oneshot => qd.clone(),
            Mode::Lace => {
                let mut r = fft::convolve_raw(n, &qd, &eigen.lambdas_d);
                if self.init == InitialCondition::Stationary && !qd.is_empty() {
                    fft::add_stationary_start(n, &qd, &eigen.lambdas_d, &mut r);
                }
                r
            }
        };
        Forward { caches, qd, r, eigen }
    }

    /// Loss over `session[start..start + len]`. With `grads`, adds
    /// `weight · ∂(nll + λ·smooth)/∂params` into it.
    pub fn window(
        &self,
        params: &CoreModelParams,
        session: &PreparedSession,
        start: usize,
        len: usize,
        grads: Option<(&mut CoreModelParams, f64)>,
    ) -> Result<WindowLoss> {
        let n = params.dim();
        let nn = n * n;
        let fwd = self.forward(params, &session.features[start..start + len]);
        if let Some(k) = fwd.caches.iter().position(|c| c.head.diag.iter().any(|d| !(*d > 0.0))) {
            return Err(Error::NumericalDomain(format!(
                "Q at step {} has a non-positive LDL pivot",
                start + k
            )));
        }
        let inv_sd = 1.0 / self.scale.sqrt();
        let eps: Vec<f64> = session.residuals[3 * start..3 * (start + len)]
            .iter()
            .map(|e| e * inv_sd)
            .collect();
        let terms = step_terms(n, &fwd.r, &eps).map_err(|e| match e {
            Error::NumericalDomain(msg) => Error::NumericalDomain(format!(
                "{} output in window at {start}: {msg}",
                self.mode.name()
            )),
            other => other,
        })?;
        let rates = rates_from_logdets(&terms.logdets, self.spectral.delta_t);
        let r_max = self.spectral.r_max;
        let out = WindowLoss {
            nll: terms.nll.iter().sum::<f64>() + len as f64 * n as f64 * self.scale.ln(),
            smooth: smooth_from_rates(&rates, r_max),
            steps: len,
            min_rate: rates.iter().copied().fold(f64::INFINITY, f64::min),
            violations: rates.iter().filter(|r| **r < -r_max).count(),
        };

        let Some((g, weight)) = grads else {
            return Ok(out);
        };
        let mut grad_r = vec![0.0; len * nn];
        nll_grad(n, &terms, weight, &mut grad_r);
        if self.lambda_weight > 0.0 {
            smooth_grad(n, &terms, self.spectral.delta_t, r_max, weight * self.lambda_weight, &mut grad_r);
        }
        let grad_q = match self.mode {
            Mode::Oneshot => grad_r,
            Mode::Lace => {
                let ld = &fwd.eigen.lambdas_d;
                let (mut gq, mut gld) = fft::convolve_backward_raw(n, &fwd.qd, ld, &grad_r);
                if self.init == InitialCondition::Stationary {
                    fft::stationary_start_backward(n, &fwd.qd, ld, &grad_r, &mut gq, &mut gld);
                }
                let dld = spectral_map_derivative(&params.spectral_theta, &self.spectral);
                for i in 0..n {
                    g.spectral_theta[i] += gld[i] * dld[i];
                }
                gq
            }
        };
        for (k, cache) in fwd.caches.iter().enumerate() {
            model_backward(cache, params, &grad_q[k * nn..(k + 1) * nn], g);
        }
        Ok(out)
    }

    /// Deployment covariances in m² for a whole session.
    ///
    /// LACE runs the sequential recursion from `r0` (or from the stationary
    /// start when `r0` is `None`); one-shot returns `Q_k` directly.
    pub fn covariances(
        &self,
        params: &CoreModelParams,
        features: &[FeatureVector],
        r0: Option<&SpdMatrix>,
    ) -> Result<Vec<SpdMatrix>> {
        self.covariances_with(params, features, r0, &self.eigen(params))
    }

    /// [`Objective::covariances`] with the learned eigenvalues replaced by
    /// `eigen` (LACE only; one-shot ignores it).
    pub fn covariances_with(
        &self,
        params: &CoreModelParams,
        features: &[FeatureVector],
        r0: Option<&SpdMatrix>,
        eigen: &EigenSet,
    ) -> Result<Vec<SpdMatrix>> {
        let n = params.dim();
        let nn = n * n;
        if eigen.dim() != n {
            return Err(Error::InvalidArgument(format!("{} eigenvalues for dimension {n}", eigen.dim())));
        }
        let raw = match self.mode {
            Mode::Oneshot => self.forward(params, features).qd,
            Mode::Lace => {
                let caches: Vec<ModelCache> = features.iter().map(|f| model_forward_cached(f, params)).collect();
                let qd: Vec<f64> = caches.iter().flat_map(|c| c.matrix().iter().copied()).collect();
                match r0 {
                    Some(r0) => {
                        let r0_model: Vec<f64> = r0.as_slice().iter().map(|x| x / self.scale).collect();
                        // Drop R_0 itself: step k pairs with the state after Q_k.
                        propagate_seq_raw(n, &r0_model, &qd, &eigen.lambdas_d)[nn..].to_vec()
                    }
                    None => {
                        let mut r = fft::convolve_raw(n, &qd, &eigen.lambdas_d);
                        if !qd.is_empty() {
                            fft::add_stationary_start(n, &qd, &eigen.lambdas_d, &mut r);
                        }
                        r
                    }
                }
            }
        };
        raw.chunks(nn)
            .enumerate()
            .map(|(k, m)| {
                SpdMatrix::new(n, m.iter().map(|x| x * self.scale).collect()).map_err(|e| {
                    Error::NumericalDomain(format!("{} covariance at step {k}: {e}", self.mode.name()))
                })
            })
            .collect()
    }
}
