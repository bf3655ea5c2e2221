//! LDL head: embedding `φ` to a positive-definite matrix.
//!
//! `D_ii = softplus(a_iᵀ φ)` and `L_ij = b_ijᵀ φ` for `i > j`.

use crate::spd::{ldl_compose_raw, lower_index, lower_len, LdlParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SpdHeadParams {
    pub dim: usize,
    pub phi_dim: usize,
    /// `n × p`, row `i` is `a_i`.
    pub a_vecs: Vec<f64>,
    /// `n(n−1)/2 × p` in packed strictly-lower order.
    pub b_vecs: Vec<f64>,
}

impl SpdHeadParams {
    pub fn zeros(dim: usize, phi_dim: usize) -> Self {
        SpdHeadParams {
            dim,
            phi_dim,
            a_vecs: vec![0.0; dim * phi_dim],
            b_vecs: vec![0.0; lower_len(dim) * phi_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim, self.phi_dim)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub pre_diag: Vec<f64>,
    pub diag: Vec<f64>,
    /// Full unit-lower `L`, row-major.
    pub lower: Vec<f64>,
    /// `L D Lᵀ`, row-major.
    pub matrix: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn head_forward(phi: &[f64], p: &SpdHeadParams) -> HeadCache {
    let n = p.dim;
    let pd = p.phi_dim;
    let pre_diag: Vec<f64> = (0..n).map(|i| dot(&p.a_vecs[i * pd..(i + 1) * pd], phi)).collect();
    let diag = pre_diag.iter().map(|u| softplus(*u)).collect::<Vec<_>>();
    let mut lower = vec![0.0; n * n];
    for i in 0..n {
        lower[i * n + i] = 1.0;
        for j in 0..i {
            let k = lower_index(i, j);
            lower[i * n + j] = dot(&p.b_vecs[k * pd..(k + 1) * pd], phi);
        }
    }
    let mut matrix = vec![0.0; n * n];
    ldl_compose_raw(n, &lower, &diag, &mut matrix);
    HeadCache {
        pre_diag,
        diag,
        lower,
        matrix,
    }
}

/// Factor parameters for `φ`; composing them gives `Q(φ)`.
pub fn spd_head(phi: &[f64], p: &SpdHeadParams) -> crate::Result<LdlParams> {
    let cache = head_forward(phi, p);
    let n = p.dim;
    let mut packed = vec![0.0; lower_len(n)];
    for i in 0..n {
        for j in 0..i {
            packed[lower_index(i, j)] = cache.lower[i * n + j];
        }
    }
    LdlParams::new(n, packed, cache.diag)
}

/// Given `G = ∂ℓ/∂Q` (full `n × n`), accumulates head gradients and returns `∂ℓ/∂φ`.
pub fn head_backward(cache: &HeadCache, phi: &[f64], p: &SpdHeadParams, grad_q: &[f64], grads: &mut SpdHeadParams) -> Vec<f64> {
    let n = p.dim;
    let pd = p.phi_dim;
    let l = &cache.lower;
    // S = G + Gᵀ; ∂ℓ/∂L = S L D; ∂ℓ/∂D_k = (Lᵀ G L)_kk.
    let mut grad_phi = vec![0.0; pd];
    for k in 0..n {
        let mut gd = 0.0;
        for i in 0..n {
            for j in 0..n {
                gd += l[i * n + k] * grad_q[i * n + j] * l[j * n + k];
            }
        }
        let gu = gd * logistic(cache.pre_diag[k]);
        let a = &p.a_vecs[k * pd..(k + 1) * pd];
        for t in 0..pd {
            grads.a_vecs[k * pd + t] += gu * phi[t];
            grad_phi[t] += gu * a[t];
        }
    }
    for i in 0..n {
        for j in 0..i {
            let mut gl = 0.0;
            for m in 0..n {
                let s = grad_q[i * n + m] + grad_q[m * n + i];
                gl += s * l[m * n + j];
            }
            gl *= cache.diag[j];
            let k = lower_index(i, j);
            let b = &p.b_vecs[k * pd..(k + 1) * pd];
            for t in 0..pd {
                grads.b_vecs[k * pd + t] += gl * phi[t];
                grad_phi[t] += gl * b[t];
            }
        }
    }
    grad_phi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spd::ldl_compose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_head(rng: &mut ChaCha8Rng, n: usize, pd: usize) -> SpdHeadParams {
        SpdHeadParams {
            dim: n,
            phi_dim: pd,
            a_vecs: (0..n * pd).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b_vecs: (0..lower_len(n) * pd).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-30.0) > 0.0);
        assert!((softplus(5.0) - (1.0 + 5.0_f64.exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_vectors_give_ln2_identity() {
        let p = SpdHeadParams::zeros(3, 4);
        let ldl = spd_head(&[0.3, -1.0, 2.0, 0.5], &p).unwrap();
        assert!(ldl.diag().iter().all(|d| (d - 0.6931471805599453).abs() < 1e-15));
        assert!(ldl.lower().iter().all(|l| *l == 0.0));
        let q = ldl_compose(&ldl).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { std::f64::consts::LN_2 } else { 0.0 };
                assert!((q.get(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_b_vectors_give_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_head(&mut rng, 3, 5);
        p.b_vecs.iter_mut().for_each(|b| *b = 0.0);
        let phi: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = head_forward(&phi, &p).matrix;
        assert!(q[1] == 0.0 && q[2] == 0.0 && q[5] == 0.0);
    }

    #[test]
    fn random_heads_are_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let p = random_head(&mut rng, 3, 6);
            let phi: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = ldl_compose(&spd_head(&phi, &p).unwrap()).unwrap();
            let oracle = nalgebra::DMatrix::from_row_slice(3, 3, q.as_slice());
            assert!(oracle.symmetric_eigen().eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn trace_gradient_on_diagonal_head() {
        // ℓ = trace(Q) with L = I: ∂ℓ/∂a_i = σ(a_iᵀφ)·φ.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = random_head(&mut rng, 3, 4);
        p.b_vecs.iter_mut().for_each(|b| *b = 0.0);
        let phi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cache = head_forward(&phi, &p);
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut g = p.zeros_like();
        head_backward(&cache, &phi, &p, &eye, &mut g);
        for i in 0..3 {
            let sig = logistic(dot(&p.a_vecs[i * 4..(i + 1) * 4], &phi));
            for t in 0..4 {
                assert!((g.a_vecs[i * 4 + t] - sig * phi[t]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_head(&mut rng, 3, 4);
        let phi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Deliberately non-symmetric upstream gradient.
        let up: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &SpdHeadParams, phi: &[f64]| dot(&head_forward(phi, p).matrix, &up);
        let cache = head_forward(&phi, &p);
        let mut g = p.zeros_like();
        let gphi = head_backward(&cache, &phi, &p, &up, &mut g);
        let h = 1e-6;
        for t in 0..4 {
            let mut a = phi.clone();
            let mut b = phi.clone();
            a[t] += h;
            b[t] -= h;
            let fd = (loss(&p, &a) - loss(&p, &b)) / (2.0 * h);
            assert!((gphi[t] - fd).abs() < 1e-7);
        }
        for k in 0..p.b_vecs.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a.b_vecs[k] += h;
            b.b_vecs[k] -= h;
            let fd = (loss(&a, &phi) - loss(&b, &phi)) / (2.0 * h);
            assert!((g.b_vecs[k] - fd).abs() < 1e-7);
        }
    }
}
