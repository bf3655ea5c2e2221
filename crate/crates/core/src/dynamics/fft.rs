//! Entry-wise unrolling of the diagonal Lyapunov recursion as causal
//! convolutions, plus the matching reverse pass.
//!
//! With `A_d = diag(λ_d)` every entry evolves on its own:
//! `y[m] = Σ_{k≤m} g^k q[m−k]` with `g = λ_{d,i} λ_{d,j}`, which is the
//! recursion `y[m] = g·y[m−1] + q[m]` started from zero.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Forward and inverse transforms of one padded length.
pub struct ConvPlan {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl ConvPlan {
    /// Plan for sequences of length `t`, padded to the next power of two
    /// that holds a full linear convolution (`≥ 2t − 1`).
    pub fn new(t: usize) -> Self {
        let len = (2 * t.max(1) - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        ConvPlan {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    pub fn padded_len(&self) -> usize {
        self.len
    }

    fn spectrum(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        for (b, v) in buf.iter_mut().zip(x) {
            b.re = *v;
        }
        self.forward.process(&mut buf);
        buf
    }

    /// First `x.len()` samples of the linear convolution `x * k`.
    pub fn causal_conv(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let t = x.len();
        assert!(2 * t - 1 <= self.len || t == 0, "sequence longer than plan");
        let kx = self.spectrum(x);
        let kk = self.spectrum(k);
        let mut prod: Vec<Complex<f64>> = kx.iter().zip(&kk).map(|(a, b)| a * b).collect();
        self.inverse.process(&mut prod);
        let scale = 1.0 / self.len as f64;
        prod[..t].iter().map(|c| c.re * scale).collect()
    }
}

/// `g^k` for `k = 0..t`.
pub fn geometric_kernel(g: f64, t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t);
    let mut p = 1.0;
    for _ in 0..t {
        out.push(p);
        p *= g;
    }
    out
}

/// `(i, j)` with `i ≥ j`, in row order.
pub fn channels(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect()
}

fn channel_series(n: usize, t: usize, data: &[f64], i: usize, j: usize) -> Vec<f64> {
    (0..t).map(|m| data[m * n * n + i * n + j]).collect()
}

/// Unrolled recursion from a zero initial state.
///
/// `qd` holds `T` row-major `n × n` matrices back to back; the result holds
/// `R̃_1 … R̃_T` in the same layout, symmetric by construction.
pub fn convolve_raw(n: usize, qd: &[f64], lambdas_d: &[f64]) -> Vec<f64> {
    let t = qd.len() / (n * n);
    let mut out = vec![0.0; qd.len()];
    if t == 0 {
        return out;
    }
    let plan = ConvPlan::new(t);
    let chans = channels(n);
    let results: Vec<Vec<f64>> = chans
        .par_iter()
        .map(|&(i, j)| {
            let q = channel_series(n, t, qd, i, j);
            let g = lambdas_d[i] * lambdas_d[j];
            plan.causal_conv(&q, &geometric_kernel(g, t))
        })
        .collect();
    for (&(i, j), y) in chans.iter().zip(&results) {
        for (m, v) in y.iter().enumerate() {
            out[m * n * n + i * n + j] = *v;
            out[m * n * n + j * n + i] = *v;
        }
    }
    out
}

/// Reverse pass of [`convolve_raw`].
///
/// `grad_r` is `∂ℓ/∂R̃` over all `T` steps (full matrices; both triangles
/// count). Returns `∂ℓ/∂Q` with each off-diagonal channel's gradient stored in
/// the lower triangle only (the upper entries are zero), and `∂ℓ/∂λ_d`.
pub fn convolve_backward_raw(
    n: usize,
    qd: &[f64],
    lambdas_d: &[f64],
    grad_r: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let t = qd.len() / (n * n);
    let mut grad_q = vec![0.0; qd.len()];
    let mut grad_ld = vec![0.0; n];
    if t == 0 {
        return (grad_q, grad_ld);
    }
    let plan = ConvPlan::new(t);
    let chans = channels(n);
    let results: Vec<(Vec<f64>, f64)> = chans
        .par_iter()
        .map(|&(i, j)| {
            let q = channel_series(n, t, qd, i, j);
            let mut gr: Vec<f64> = (0..t)
                .map(|m| {
                    let base = m * n * n;
                    if i == j {
                        grad_r[base + i * n + i]
                    } else {
                        grad_r[base + i * n + j] + grad_r[base + j * n + i]
                    }
                })
                .collect();
            gr.reverse();
            let g = lambdas_d[i] * lambdas_d[j];
            // ∂ℓ/∂q[j] = Σ_k G[j+k] g^k
            let mut dq = plan.causal_conv(&gr, &geometric_kernel(g, t));
            dq.reverse();
            // c_k = Σ_j G[j+k] q[j];  ∂ℓ/∂g = Σ_{k≥1} k g^{k−1} c_k
            let mut c = plan.causal_conv(&gr, &q);
            c.reverse();
            let mut dg = 0.0;
            let mut p = 1.0;
            for (k, ck) in c.iter().enumerate().skip(1) {
                dg += k as f64 * p * ck;
                p *= g;
            }
            (dq, dg)
        })
        .collect();
    for (&(i, j), (dq, dg)) in chans.iter().zip(&results) {
        for (m, v) in dq.iter().enumerate() {
            grad_q[m * n * n + i * n + j] = *v;
        }
        grad_ld[i] += dg * lambdas_d[j];
        grad_ld[j] += dg * lambdas_d[i];
    }
    (grad_q, grad_ld)
}

/// Adds the free response of a stationary start, `g^{m+1} · Q_0 / (1 − g)`,
/// to an unrolled sequence. With it the first output equals the fixed point
/// of the recursion for a constant `Q_0`.
pub fn add_stationary_start(n: usize, qd: &[f64], lambdas_d: &[f64], out: &mut [f64]) {
    let t = qd.len() / (n * n);
    for (i, j) in channels(n) {
        let g = lambdas_d[i] * lambdas_d[j];
        let r0 = qd[i * n + j] / (1.0 - g);
        let mut p = g;
        for m in 0..t {
            let v = p * r0;
            out[m * n * n + i * n + j] += v;
            if i != j {
                out[m * n * n + j * n + i] += v;
            }
            p *= g;
        }
    }
}

/// Reverse pass of [`add_stationary_start`], accumulating into `grad_q`
/// (lower-triangle convention) and `grad_ld`.
pub fn stationary_start_backward(
    n: usize,
    qd: &[f64],
    lambdas_d: &[f64],
    grad_r: &[f64],
    grad_q: &mut [f64],
    grad_ld: &mut [f64],
) {
    let t = qd.len() / (n * n);
    for (i, j) in channels(n) {
        let g = lambdas_d[i] * lambdas_d[j];
        let q0 = qd[i * n + j];
        let inv = 1.0 / (1.0 - g);
        let mut s_pow = 0.0; // Σ G_m g^{m+1}
        let mut s_der = 0.0; // Σ G_m (m+1) g^m
        let mut p = 1.0; // g^m
        for m in 0..t {
            let base = m * n * n;
            let gm = if i == j {
                grad_r[base + i * n + i]
            } else {
                grad_r[base + i * n + j] + grad_r[base + j * n + i]
            };
            s_der += gm * (m + 1) as f64 * p;
            p *= g;
            s_pow += gm * p;
        }
        grad_q[i * n + j] += s_pow * inv;
        let dg = q0 * (s_der * inv + s_pow * inv * inv);
        grad_ld[i] += dg * lambdas_d[j];
        grad_ld[j] += dg * lambdas_d[i];
    }
}
