//! Gaussian negative log-likelihood and the log-det smoothness penalty.

use serde::{Deserialize, Serialize};

use crate::dynamics::{logdet_rate, CovTrajectory};
use crate::error::{Error, Result};
use crate::spd::{cholesky_raw, cholesky_solve_raw, quad_form};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub smooth: f64,
    pub total: f64,
    pub lambda_weight: f64,
}

impl LossBreakdown {
    pub fn new(nll: f64, smooth: f64, lambda_weight: f64) -> Self {
        LossBreakdown {
            nll,
            smooth,
            total: nll + lambda_weight * smooth,
            lambda_weight,
        }
    }

    /// Every component divided by `steps`.
    pub fn per_step(&self, steps: usize) -> Self {
        let s = steps.max(1) as f64;
        LossBreakdown::new(self.nll / s, self.smooth / s, self.lambda_weight)
    }
}

/// `Σ_k log det R_k + ε_kᵀ R_k⁻¹ ε_k`.
pub fn nll_loss(traj: &CovTrajectory, residuals: &[[f64; 3]]) -> Result<f64> {
    if traj.len() != residuals.len() {
        return Err(Error::InvalidArgument(format!(
            "{} covariances for {} residuals",
            traj.len(),
            residuals.len()
        )));
    }
    if traj.dim() != 3 && !traj.is_empty() {
        return Err(Error::InvalidArgument("residuals are 3-vectors".into()));
    }
    let mut total = 0.0;
    for (r, e) in traj.mats.iter().zip(residuals) {
        total += r.logdet()? + quad_form(r, e)?;
    }
    Ok(total)
}

pub fn nll_mean(traj: &CovTrajectory, residuals: &[[f64; 3]]) -> Result<f64> {
    Ok(nll_loss(traj, residuals)? / residuals.len().max(1) as f64)
}

/// `Σ_k max(0, −(r_max + rate_k))²`.
pub fn smooth_loss(traj: &CovTrajectory, r_max: f64) -> Result<f64> {
    Ok(smooth_from_rates(&logdet_rate(traj)?, r_max))
}

pub fn smooth_from_rates(rates: &[f64], r_max: f64) -> f64 {
    rates.iter().map(|r| (-(r_max + r)).max(0.0).powi(2)).sum()
}

/// Per-step quantities of the likelihood over raw storage.
pub(crate) struct StepTerms {
    pub nll: Vec<f64>,
    pub logdets: Vec<f64>,
    /// `R_k⁻¹`, row-major, back to back.
    pub inverses: Vec<f64>,
    /// `R_k⁻¹ ε_k`, back to back.
    pub whitened: Vec<f64>,
}

/// Likelihood terms for `T` matrices `r` and residuals `eps` (`T × n`).
pub(crate) fn step_terms(n: usize, r: &[f64], eps: &[f64]) -> Result<StepTerms> {
    let t = eps.len() / n;
    let nn = n * n;
    let mut out = StepTerms {
        nll: Vec::with_capacity(t),
        logdets: Vec::with_capacity(t),
        inverses: vec![0.0; t * nn],
        whitened: vec![0.0; t * n],
    };
    let mut g = vec![0.0; nn];
    let mut col = vec![0.0; n];
    for k in 0..t {
        let m = &r[k * nn..(k + 1) * nn];
        if !cholesky_raw(n, m, &mut g) {
            return Err(Error::NumericalDomain(format!(
                "covariance at step {k} is not positive definite"
            )));
        }
        let ld: f64 = (0..n).map(|i| 2.0 * g[i * n + i].ln()).sum();
        let x = &mut out.whitened[k * n..(k + 1) * n];
        x.copy_from_slice(&eps[k * n..(k + 1) * n]);
        cholesky_solve_raw(n, &g, x);
        let q: f64 = x.iter().zip(&eps[k * n..(k + 1) * n]).map(|(a, b)| a * b).sum();
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = 0.0);
            col[j] = 1.0;
            cholesky_solve_raw(n, &g, &mut col);
            for i in 0..n {
                out.inverses[k * nn + i * n + j] = col[i];
            }
        }
        out.logdets.push(ld);
        out.nll.push(ld + q.max(0.0));
    }
    Ok(out)
}

/// `∂NLL/∂R_k = R⁻¹ − R⁻¹εεᵀR⁻¹`, written into `grad` (scaled by `weight`).
pub(crate) fn nll_grad(n: usize, terms: &StepTerms, weight: f64, grad: &mut [f64]) {
    let nn = n * n;
    for k in 0..terms.nll.len() {
        let inv = &terms.inverses[k * nn..(k + 1) * nn];
        let x = &terms.whitened[k * n..(k + 1) * n];
        for i in 0..n {
            for j in 0..n {
                grad[k * nn + i * n + j] += weight * (inv[i * n + j] - x[i] * x[j]);
            }
        }
    }
}

/// Adds `weight · ∂smooth/∂R_k` and returns the penalty value.
pub(crate) fn smooth_grad(
    n: usize,
    terms: &StepTerms,
    delta_t: f64,
    r_max: f64,
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    let nn = n * n;
    let mut total = 0.0;
    for k in 0..terms.logdets.len().saturating_sub(1) {
        let rate = (terms.logdets[k + 1] - terms.logdets[k]) / delta_t;
        let h = (-(r_max + rate)).max(0.0);
        if h == 0.0 {
            continue;
        }
        total += h * h;
        // ∂h²/∂logdet_{k+1} = −2h/Δt, ∂h²/∂logdet_k = 2h/Δt, ∂logdet/∂R = R⁻¹.
        let c = weight * 2.0 * h / delta_t;
        for e in 0..nn {
            grad[(k + 1) * nn + e] -= c * terms.inverses[(k + 1) * nn + e];
            grad[k * nn + e] += c * terms.inverses[k * nn + e];
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{propagate_seq, EigenSet, SpectralConfig};
    use crate::spd::SpdMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(mats: Vec<SpdMatrix>, dt: f64) -> CovTrajectory {
        CovTrajectory {
            delta_t: dt,
            mats,
            eigen: None,
            source: "test".into(),
        }
    }

    #[test]
    fn nll_examples() {
        let eye = SpdMatrix::identity(3);
        assert_eq!(nll_loss(&traj(vec![eye.clone(); 4], 0.05), &[[0.0; 3]; 4]).unwrap(), 0.0);
        assert!((nll_loss(&traj(vec![eye.clone()], 0.05), &[[1.0, 2.0, 2.0]]).unwrap() - 9.0).abs() < 1e-12);
        let four = SpdMatrix::scaled_identity(3, 4.0).unwrap();
        let v = nll_loss(&traj(vec![four], 0.05), &[[0.0; 3]]).unwrap();
        assert!((v - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((v - 4.15888).abs() < 1e-5);
        assert!(nll_loss(&traj(vec![eye], 0.05), &[[0.0; 3]; 2]).is_err());
    }

    #[test]
    fn smooth_examples() {
        assert_eq!(smooth_from_rates(&[-0.5; 10], 1.0), 0.0);
        assert_eq!(smooth_from_rates(&[-0.5, -2.0, 0.3], 1.0), 1.0);
    }

    #[test]
    fn nll_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            // Random rotation from Gram–Schmidt.
            let mut q = [[0.0f64; 3]; 3];
            for i in 0..3 {
                let mut v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                for row in q.iter().take(i) {
                    let d: f64 = (0..3).map(|k| v[k] * row[k]).sum();
                    (0..3).for_each(|k| v[k] -= d * row[k]);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                q[i] = v.map(|x| x / norm);
            }
            let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut r = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    r[i * 3 + j] = (0..3).map(|k| b[i * 3 + k] * b[j * 3 + k]).sum::<f64>() + if i == j { 0.2 } else { 0.0 };
                }
            }
            let e: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let mut rr = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    rr[i * 3 + j] = (0..3)
                        .flat_map(|a| (0..3).map(move |c| (a, c)))
                        .map(|(a, c)| q[i][a] * r[a * 3 + c] * q[j][c])
                        .sum();
                }
            }
            let re: [f64; 3] = std::array::from_fn(|i| (0..3).map(|a| q[i][a] * e[a]).sum());
            let a = nll_loss(&traj(vec![SpdMatrix::new(3, r).unwrap()], 1.0), &[e]).unwrap();
            let b = nll_loss(&traj(vec![SpdMatrix::new(3, rr).unwrap()], 1.0), &[re]).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn penalty_vanishes_on_bounded_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = SpectralConfig::default();
        let eig = EigenSet::from_lambdas(&[cfg.lambda_min; 3], cfg.delta_t).unwrap();
        let r0 = SpdMatrix::scaled_identity(3, 100.0).unwrap();
        let qd: Vec<SpdMatrix> = (0..200)
            .map(|_| SpdMatrix::diagonal(&[rng.random_range(1e-4..1e-2); 3]).unwrap())
            .collect();
        let t = propagate_seq(&r0, &qd, &eig).unwrap();
        assert!(smooth_loss(&t, cfg.r_max).unwrap() <= 1e-10);
    }

    #[test]
    fn raw_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, t) = (3, 6);
        let mut r = vec![0.0; t * 9];
        for k in 0..t {
            let s = rng.random_range(0.05..3.0);
            for i in 0..3 {
                r[k * 9 + i * 4] = s * rng.random_range(0.8..1.2);
            }
            r[k * 9 + 1] = 0.1 * s;
            r[k * 9 + 3] = 0.1 * s;
        }
        let eps: Vec<f64> = (0..t * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (dt, r_max, w) = (0.05, 6.0, 0.7);
        // Evaluated on the symmetric part, the convention the reverse pass assumes.
        let loss = |r: &[f64]| -> f64 {
            let mut r = r.to_vec();
            for m in r.chunks_mut(9) {
                crate::spd::symmetrize(3, m);
            }
            let terms = step_terms(n, &r, &eps).unwrap();
            let rates: Vec<f64> = terms.logdets.windows(2).map(|p| (p[1] - p[0]) / dt).collect();
            terms.nll.iter().sum::<f64>() + w * smooth_from_rates(&rates, r_max)
        };
        let terms = step_terms(n, &r, &eps).unwrap();
        let mut g = vec![0.0; r.len()];
        nll_grad(n, &terms, 1.0, &mut g);
        assert!(smooth_grad(n, &terms, dt, r_max, w, &mut g) > 0.0);
        let h = 1e-6;
        for idx in 0..r.len() {
            let mut a = r.clone();
            let mut b = r.clone();
            a[idx] += h;
            b[idx] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((g[idx] - fd).abs() < 1e-5 * fd.abs().max(1.0), "{idx}: {} vs {fd}", g[idx]);
        }
    }
}
