//! Single-query attention over the track circle.
//!
//! The query is the normalized arc length `s ∈ [0, 1)` placed on the unit
//! circle; each key is an angle on the same circle. Similarity is the real
//! part of `conj(q)·k`, i.e. `cos(2π(k − s))`, so attention is periodic in `s`.

use std::f64::consts::TAU;

/// Keys, values, output projection and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Key positions on the track circle, in turns.
    pub key_angles: Vec<f64>,
    /// `a × b`, row-major: one value embedding per key.
    pub values: Vec<f64>,
    /// `c × b`, row-major.
    pub out_proj: Vec<f64>,
    pub temperature: f64,
    pub value_dim: usize,
}

impl AttentionParams {
    pub fn keys(&self) -> usize {
        self.key_angles.len()
    }

    pub fn out_dim(&self) -> usize {
        self.out_proj.len() / self.value_dim
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            key_angles: vec![0.0; self.key_angles.len()],
            values: vec![0.0; self.values.len()],
            out_proj: vec![0.0; self.out_proj.len()],
            temperature: 0.0,
            value_dim: self.value_dim,
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub s_norm: f64,
    pub similarities: Vec<f64>,
    pub weights: Vec<f64>,
    /// `Vᵀ · weights`.
    pub mixed: Vec<f64>,
    pub output: Vec<f64>,
}

fn phase(key: f64, s: f64) -> f64 {
    TAU * (key - s.rem_euclid(1.0))
}

pub fn attention_forward(s_norm: f64, p: &AttentionParams) -> AttentionCache {
    let a = p.keys();
    let b = p.value_dim;
    let c = p.out_dim();
    let similarities: Vec<f64> = p.key_angles.iter().map(|k| phase(*k, s_norm).cos()).collect();

    let inv_tau = 1.0 / p.temperature;
    let zmax = similarities.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x)) * inv_tau;
    let mut weights: Vec<f64> = similarities.iter().map(|x| (x * inv_tau - zmax).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    let mut mixed = vec![0.0; b];
    for j in 0..a {
        let w = weights[j];
        for (m, v) in mixed.iter_mut().zip(&p.values[j * b..(j + 1) * b]) {
            *m += w * v;
        }
    }
    let output = (0..c)
        .map(|r| {
            p.out_proj[r * b..(r + 1) * b]
                .iter()
                .zip(&mixed)
                .map(|(w, h)| w * h)
                .sum()
        })
        .collect();
    AttentionCache {
        s_norm,
        similarities,
        weights,
        mixed,
        output,
    }
}

/// `W · (Vᵀ · softmax(cos(2π(K − s)) / τ))`.
pub fn attention_embed(s_norm: f64, p: &AttentionParams) -> Vec<f64> {
    attention_forward(s_norm, p).output
}

/// Accumulates parameter gradients into `grads` and returns `∂/∂s_norm`.
pub fn attention_backward(
    cache: &AttentionCache,
    p: &AttentionParams,
    grad_out: &[f64],
    grads: &mut AttentionParams,
) -> f64 {
    let a = p.keys();
    let b = p.value_dim;
    let c = p.out_dim();

    let mut grad_mixed = vec![0.0; b];
    for r in 0..c {
        let g = grad_out[r];
        for k in 0..b {
            grads.out_proj[r * b + k] += g * cache.mixed[k];
            grad_mixed[k] += g * p.out_proj[r * b + k];
        }
    }

    let mut grad_w = vec![0.0; a];
    for j in 0..a {
        let row = &p.values[j * b..(j + 1) * b];
        let w = cache.weights[j];
        let mut acc = 0.0;
        for k in 0..b {
            grads.values[j * b + k] += w * grad_mixed[k];
            acc += row[k] * grad_mixed[k];
        }
        grad_w[j] = acc;
    }

    let dot: f64 = cache.weights.iter().zip(&grad_w).map(|(w, g)| w * g).sum();
    let inv_tau = 1.0 / p.temperature;
    let mut grad_s = 0.0;
    let mut grad_tau = 0.0;
    for j in 0..a {
        // Softmax Jacobian-vector product on the logits z = sim / τ.
        let grad_z = cache.weights[j] * (grad_w[j] - dot);
        let grad_sim = grad_z * inv_tau;
        grad_tau -= grad_z * cache.similarities[j] * inv_tau * inv_tau;
        let dsim_dphase = -phase(p.key_angles[j], cache.s_norm).sin() * TAU;
        grads.key_angles[j] += grad_sim * dsim_dphase;
        grad_s -= grad_sim * dsim_dphase;
    }
    grads.temperature += grad_tau;
    grad_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(keys: Vec<f64>, tau: f64, b: usize, c: usize, seed: u64) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = keys.len();
        AttentionParams {
            key_angles: keys,
            values: (0..a * b).map(|_| rng.random_range(-1.0..1.0)).collect(),
            out_proj: (0..c * b).map(|_| rng.random_range(-1.0..1.0)).collect(),
            temperature: tau,
            value_dim: b,
        }
    }

    #[test]
    fn single_key_passes_its_value_through() {
        let p = params(vec![0.37], 0.1, 3, 2, 1);
        let cache = attention_forward(0.9, &p);
        assert_eq!(cache.weights, vec![1.0]);
        let expected: Vec<f64> = (0..2)
            .map(|r| (0..3).map(|k| p.out_proj[r * 3 + k] * p.values[k]).sum())
            .collect();
        for (o, e) in cache.output.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_keys_split_evenly() {
        let p = params(vec![0.0, 0.5], 0.3, 2, 2, 2);
        let w = attention_forward(0.25, &p).weights;
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_selects_nearest_key() {
        let p = params(vec![0.0, 0.5], 0.01, 2, 2, 3);
        let w = attention_forward(0.01, &p).weights;
        assert!(w[0] >= 1.0 - 1e-6, "{w:?}");
    }

    #[test]
    fn sharp_limit_with_similarity_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 100 {
            let keys: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = rng.random_range(0.0..1.0);
            let p = params(keys, 1e-3, 4, 2, 4);
            let cache = attention_forward(s, &p);
            let mut sims = cache.similarities.clone();
            sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sims[0] - sims[1] < 0.05 {
                continue;
            }
            let max_w = cache.weights.iter().cloned().fold(0.0, f64::max);
            assert!(max_w >= 1.0 - 1e-6);
            checked += 1;
        }
    }

    #[test]
    fn periodic_in_arc_length() {
        let p = params(vec![0.1, 0.35, 0.8], 0.05, 4, 3, 5);
        // Dyadic arguments survive the +1 shift exactly.
        for s in [0.0, 0.125, 0.5, 0.9375] {
            assert_eq!(attention_embed(s, &p), attention_embed((s + 1.0) % 1.0, &p));
            assert_eq!(attention_embed(s, &p), attention_embed(s + 1.0, &p));
        }
    }

    fn numeric_grad(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn weight_gradient_at_symmetric_point() {
        // Two keys at 0 and 0.5, s = 0.25: dw0/ds = w0·w1·(dsim0/ds − dsim1/ds)/τ
        // with dsim0/ds = −2π and dsim1/ds = 2π, so dw0/ds = −π/τ.
        let tau = 0.2;
        let mut p = params(vec![0.0, 0.5], tau, 1, 1, 6);
        p.values = vec![1.0, 0.0];
        p.out_proj = vec![1.0];
        // Output equals w0, so the input gradient is d w0 / ds.
        let cache = attention_forward(0.25, &p);
        let mut g = p.zeros_like();
        let analytic = attention_backward(&cache, &p, &[1.0], &mut g);
        let fd = numeric_grad(|s| attention_forward(s, &p).weights[0], 0.25);
        assert!((analytic - fd).abs() < 1e-6 * fd.abs(), "{analytic} vs {fd}");
        let closed = 0.25 * (-2.0 * TAU) / tau;
        assert!((analytic - closed).abs() < 1e-9, "{analytic} vs {closed}");
        assert!((analytic.abs() - std::f64::consts::PI / tau).abs() < 1e-9);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let keys: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let p = params(keys, 0.15, 3, 2, 7);
        let s = 0.42;
        let upstream = [0.7, -1.3];
        let loss = |p: &AttentionParams, s: f64| -> f64 {
            attention_embed(s, p).iter().zip(&upstream).map(|(o, u)| o * u).sum()
        };
        let cache = attention_forward(s, &p);
        let mut g = p.zeros_like();
        let gs = attention_backward(&cache, &p, &upstream, &mut g);
        let fd = numeric_grad(|x| loss(&p, x), s);
        assert!((gs - fd).abs() <= 1e-6 * fd.abs().max(1.0));

        let fd_tau = numeric_grad(
            |t| {
                let mut q = p.clone();
                q.temperature = t;
                loss(&q, s)
            },
            p.temperature,
        );
        assert!((g.temperature - fd_tau).abs() <= 1e-6 * fd_tau.abs().max(1.0));
        for j in 0..p.keys() {
            let fd_k = numeric_grad(
                |x| {
                    let mut q = p.clone();
                    q.key_angles[j] = x;
                    loss(&q, s)
                },
                p.key_angles[j],
            );
            assert!((g.key_angles[j] - fd_k).abs() <= 1e-6 * fd_k.abs().max(1.0));
        }
        for i in 0..p.values.len() {
            let fd_v = numeric_grad(
                |x| {
                    let mut q = p.clone();
                    q.values[i] = x;
                    loss(&q, s)
                },
                p.values[i],
            );
            assert!((g.values[i] - fd_v).abs() <= 1e-7 * fd_v.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn weights_form_a_distribution(
            keys in proptest::collection::vec(0.0f64..1.0, 1..16),
            s in 0.0f64..1.0,
            tau in 1e-3f64..10.0,
        ) {
            let p = params(keys, tau, 2, 2, 0);
            let w = attention_forward(s, &p).weights;
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn periodicity_general(s in 0.0f64..1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keys: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            let p = params(keys, 0.1, 3, 2, seed);
            let a = attention_embed(s, &p);
            let b = attention_embed(s + 1.0, &p);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
