//! Analytic gradients of the full objective against central differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::objective::Objective;
use super::{Mode, PreparedSession};
use crate::error::{Error, Result};
use crate::net::CoreModelParams;

pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries below it must agree to
/// `1e-4 · GRAD_CHECK_FLOOR` absolutely. On a per-step loss of order 10 the
/// difference quotient at `h = 1e-5` carries round-off of a few 1e-9.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_name: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

fn coordinate_name(params: &CoreModelParams, mut flat: usize) -> String {
    for t in params.tensors() {
        if flat < t.data.len() {
            return format!("{}[{flat}]", t.name);
        }
        flat -= t.data.len();
    }
    "?".into()
}

/// Checks `∂(nll + λ·smooth)/∂p` (per-step mean) on the whole session.
///
/// Samples `coordinates` parameters uniformly without replacement; in LACE
/// mode every spectral parameter is always included.
pub fn grad_check(
    params: &CoreModelParams,
    session: &PreparedSession,
    obj: &Objective,
    coordinates: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let t = session.len();
    if t == 0 {
        return Err(Error::InvalidArgument("empty session".into()));
    }
    let loss = |p: &CoreModelParams| -> Result<f64> {
        let w = obj.window(p, session, 0, t, None)?;
        Ok((w.nll + obj.lambda_weight * w.smooth) / t as f64)
    };
    let mut grads = params.zeros_like();
    obj.window(params, session, 0, t, Some((&mut grads, 1.0 / t as f64)))?;
    let analytic = grads.flatten();
    let base = params.flatten();
    let total = base.len();
    let theta_start = total - params.spectral_theta.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, total, coordinates.min(total)).into_vec();
    if obj.mode == Mode::Lace {
        for i in theta_start..total {
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
    }
    picked.sort_unstable();

    let mut report = GradCheckReport {
        coordinates: picked.len(),
        max_rel_error: 0.0,
        worst_name: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut probe = params.clone();
    for &i in &picked {
        let mut x = base.clone();
        x[i] = base[i] + GRAD_CHECK_STEP;
        probe.set_flat(&x);
        let plus = loss(&probe)?;
        x[i] = base[i] - GRAD_CHECK_STEP;
        probe.set_flat(&x);
        let minus = loss(&probe)?;
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if err > report.max_rel_error || report.worst_name.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_name = coordinate_name(params, i);
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{fft, spectral_map, spectral_map_derivative, SpectralConfig};
    use crate::features::FeatureVector;
    use crate::learn::objective::InitialCondition;
    use crate::net::ModelConfig;
    use rand::Rng;

    fn session(seed: u64, len: usize) -> PreparedSession {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PreparedSession {
            features: (0..len)
                .map(|k| FeatureVector {
                    s_norm: (0.1 + k as f64 / 40.0).fract(),
                    sdot_norm: rng.random_range(0.8..1.2),
                    g_norm: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect(),
            residuals: (0..3 * len).map(|_| rng.random_range(-1.5..1.5)).collect(),
            delta_t: 0.05,
            arc: vec![0.0; len],
            truth: None,
        }
    }

    fn objective(mode: Mode, lambda_weight: f64) -> Objective {
        Objective {
            mode,
            spectral: SpectralConfig::default(),
            lambda_weight,
            init: InitialCondition::Stationary,
            scale: 1.0,
        }
    }

    fn model() -> ModelConfig {
        ModelConfig {
            keys: 8,
            value_dim: 8,
            embed_dim: 4,
            phi_dim: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn oneshot_with_trivial_params_matches_closed_form() {
        // All-zero network: Q = ln2·I, so ∂ℓ/∂a_i = σ(0)·φ = 0 and only the
        // final-layer bias sees a gradient through the head.
        let mut params = CoreModelParams::init(&model(), 0).unwrap();
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        params.attention.temperature = 0.1;
        let s = session(1, 8);
        let obj = objective(Mode::Oneshot, 0.0);
        let mut g = params.zeros_like();
        obj.window(&params, &s, 0, 8, Some((&mut g, 1.0))).unwrap();
        // With φ = 0 the a-vector gradients vanish; the b-vector ones too.
        assert!(g.head.a_vecs.iter().all(|x| *x == 0.0));
        assert!(g.head.b_vecs.iter().all(|x| *x == 0.0));
        // ∂NLL/∂D_i = Σ_k 1/d − ε_i²/d², d = ln 2, with L = I.
        let d = std::f64::consts::LN_2;
        let mut expected = [0.0; 3];
        for k in 0..8 {
            let e = s.residual(k);
            for i in 0..3 {
                expected[i] += 1.0 / d - e[i] * e[i] / (d * d);
            }
        }
        let r = grad_check(&params, &s, &obj, 200, 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        // The head diagonal gradient equals σ(0)·expected; check via a_vecs
        // after shifting φ by a unit bias on one output.
        let mut shifted = params.clone();
        let last = shifted.mlp.layers.len() - 1;
        shifted.mlp.layers[last].bias[0] = 1.0;
        let mut g = params.zeros_like();
        obj.window(&shifted, &s, 0, 8, Some((&mut g, 1.0))).unwrap();
        for i in 0..3 {
            assert!((g.head.a_vecs[i * 16] - 0.5 * expected[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn full_objective_gradients_in_both_modes() {
        let s = session(3, 16);
        for (mode, lw) in [(Mode::Oneshot, 1.0), (Mode::Lace, 0.0), (Mode::Lace, 1.0)] {
            let mut params = CoreModelParams::init(&model(), 7).unwrap();
            params.spectral_theta = vec![-0.4, 0.3, 1.1];
            let r = grad_check(&params, &s, &objective(mode, lw), 200, 11).unwrap();
            assert!(r.coordinates >= 200);
            assert!(r.max_rel_error < 1e-4, "{mode:?}: {r:?}");
        }
    }

    #[test]
    fn spectral_gradient_matches_symbolic_series() {
        // n = 1, T = 3: R_2 = q_2 + g q_1 + g² q_0 with g = λ_d².
        let cfg = SpectralConfig::bounded(1, 2.0, 0.05).unwrap();
        let theta = [0.7];
        let q = [0.3, 1.1, 0.6];
        let w = [0.5, -1.0, 2.0];
        let ld = spectral_map(&theta, &cfg).lambdas_d;
        let (_, gld) = fft::convolve_backward_raw(1, &q, &ld, &w);
        let dtheta = gld[0] * spectral_map_derivative(&theta, &cfg)[0];
        let g = ld[0] * ld[0];
        let dg = w[1] * q[0] + w[2] * (q[1] + 2.0 * g * q[0]);
        let expected = dg * 2.0 * ld[0] * spectral_map_derivative(&theta, &cfg)[0];
        assert!((dtheta - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }
}
