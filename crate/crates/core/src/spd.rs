//! Small dense symmetric positive-definite matrices.
//!
//! Everything here is sized for the 3×3 position covariance (or a handful of
//! dimensions more), so the algorithms are the plain textbook ones: Cholesky
//! for solves and log-determinants, cyclic Jacobi for eigenvalues.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positive-definiteness threshold relative to the trace.
pub const SPD_REL_TOL: f64 = 1e-12;

/// A symmetric positive-definite matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SpdMatrix {
    /// Builds an SPD matrix from row-major entries.
    ///
    /// The input is symmetrized as `(m + mᵀ)/2` and then validated: the
    /// smallest eigenvalue must exceed `SPD_REL_TOL · trace`.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if entries.len() != dim * dim {
            return Err(Error::InvalidArgument(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalDomain("non-finite matrix entry".into()));
        }
        let mut data = entries;
        symmetrize(dim, &mut data);
        let m = SpdMatrix { dim, data };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("rows must form a square matrix".into()));
        }
        Self::new(dim, rows.iter().flatten().copied().collect())
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0).expect("identity is SPD")
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        Self::diagonal(&vec![scale; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let dim = diag.len();
        let mut data = vec![0.0; dim * dim];
        for (i, d) in diag.iter().enumerate() {
            data[i * dim + i] = *d;
        }
        Self::new(dim, data)
    }

    fn validate(&self) -> Result<()> {
        let trace = self.trace();
        let min = symmetric_eigenvalues(self.dim, &self.data)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if !(trace > 0.0) || !(min > SPD_REL_TOL * trace) {
            return Err(Error::NumericalDomain(format!(
                "matrix is not positive definite (min eigenvalue {min:e}, trace {trace:e})"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.dim, self.data.iter().map(|x| x * factor).collect())
    }

    pub fn cholesky(&self) -> Result<Cholesky> {
        Cholesky::factor(self.dim, &self.data)
    }

    pub fn logdet(&self) -> Result<f64> {
        Ok(self.cholesky()?.logdet())
    }

    /// `m⁻¹ v` via the Cholesky factor.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(dim_mismatch(self.dim, v.len()));
        }
        Ok(self.cholesky()?.solve(v))
    }

    pub fn inverse(&self) -> Result<SpdMatrix> {
        let chol = self.cholesky()?;
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = chol.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        SpdMatrix::new(n, inv)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(self)
    }
}

fn dim_mismatch(expected: usize, got: usize) -> Error {
    Error::InvalidArgument(format!("dimension mismatch: expected {expected}, got {got}"))
}

pub(crate) fn symmetrize(dim: usize, data: &mut [f64]) {
    for i in 0..dim {
        for j in (i + 1)..dim {
            let avg = 0.5 * (data[i * dim + j] + data[j * dim + i]);
            data[i * dim + j] = avg;
            data[j * dim + i] = avg;
        }
    }
}

/// Unit-lower-triangular factor plus positive diagonal.
///
/// `lower` holds the strictly-lower entries row by row: `(1,0), (2,0), (2,1), …`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdlParams {
    dim: usize,
    lower: Vec<f64>,
    diag: Vec<f64>,
}

/// Position of `L[i][j]` (`i > j`) inside the packed strictly-lower storage.
pub fn lower_index(i: usize, j: usize) -> usize {
    debug_assert!(i > j);
    i * (i - 1) / 2 + j
}

pub fn lower_len(dim: usize) -> usize {
    dim * (dim - 1) / 2
}

impl LdlParams {
    pub fn new(dim: usize, lower: Vec<f64>, diag: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if lower.len() != lower_len(dim) || diag.len() != dim {
            return Err(Error::InvalidParameter(format!(
                "LDL shapes for dim {dim}: need {} lower and {dim} diagonal entries, got {} and {}",
                lower_len(dim),
                lower.len(),
                diag.len()
            )));
        }
        if let Some((i, d)) = diag.iter().enumerate().find(|(_, d)| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidParameter(format!("diagonal entry {i} is {d}, must be > 0")));
        }
        if lower.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite lower entry".into()));
        }
        Ok(LdlParams { dim, lower, diag })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// The full unit-lower-triangular `L`, row-major.
    pub fn lower_matrix(&self) -> Vec<f64> {
        let n = self.dim;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            l[i * n + i] = 1.0;
            for j in 0..i {
                l[i * n + j] = self.lower[lower_index(i, j)];
            }
        }
        l
    }
}

/// `L · D · Lᵀ`.
pub fn ldl_compose(p: &LdlParams) -> Result<SpdMatrix> {
    let n = p.dim;
    let l = p.lower_matrix();
    let mut out = vec![0.0; n * n];
    ldl_compose_raw(n, &l, &p.diag, &mut out);
    // Composition of a valid LdlParams is SPD in exact arithmetic; extreme
    // diagonal ratios can still fall below the trace-relative threshold.
    SpdMatrix::new(n, out)
}

/// `out = L D Lᵀ` for a full row-major unit-lower `l`.
pub(crate) fn ldl_compose_raw(n: usize, l: &[f64], d: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for j in 0..=i {
            // L is lower triangular, so the sum stops at min(i, j) = j.
            let mut acc = 0.0;
            for k in 0..=j {
                acc += l[i * n + k] * d[k] * l[j * n + k];
            }
            out[i * n + j] = acc;
            out[j * n + i] = acc;
        }
    }
}

/// Lower Cholesky factor `m = G Gᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    factor: Vec<f64>,
}

impl Cholesky {
    pub fn factor(dim: usize, m: &[f64]) -> Result<Self> {
        let mut factor = vec![0.0; dim * dim];
        if !cholesky_raw(dim, m, &mut factor) {
            return Err(Error::NumericalDomain(
                "Cholesky factorization failed: matrix is not positive definite".into(),
            ));
        }
        Ok(Cholesky { dim, factor })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major lower factor.
    pub fn factor_matrix(&self) -> &[f64] {
        &self.factor
    }

    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.factor[i * self.dim + i].ln()).sum::<f64>()
    }

    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let mut x = v.to_vec();
        cholesky_solve_raw(self.dim, &self.factor, &mut x);
        x
    }

    /// `G · z`, mapping standard normals to samples with covariance `m`.
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim;
        (0..n)
            .map(|i| (0..=i).map(|k| self.factor[i * n + k] * z[k]).sum())
            .collect()
    }
}

/// Returns false when a pivot is not strictly positive.
pub(crate) fn cholesky_raw(n: usize, m: &[f64], g: &mut [f64]) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= g[i * n + k] * g[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return false;
                }
                g[i * n + i] = s.sqrt();
            } else {
                g[i * n + j] = s / g[j * n + j];
            }
        }
        for j in (i + 1)..n {
            g[i * n + j] = 0.0;
        }
    }
    true
}

/// Solves `G Gᵀ x = b` in place.
pub(crate) fn cholesky_solve_raw(n: usize, g: &[f64], x: &mut [f64]) {
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= g[i * n + k] * x[k];
        }
        x[i] = s / g[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= g[k * n + i] * x[k];
        }
        x[i] = s / g[i * n + i];
    }
}

pub fn logdet(m: &SpdMatrix) -> Result<f64> {
    m.logdet()
}

/// `vᵀ m⁻¹ v`, computed by solving rather than inverting.
pub fn quad_form(m: &SpdMatrix, v: &[f64]) -> Result<f64> {
    let x = m.solve(v)?;
    Ok(v.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().max(0.0))
}

/// Frobenius norm of `a − b`.
pub fn frob_dist(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    if a.dim != b.dim {
        return Err(dim_mismatch(a.dim, b.dim));
    }
    Ok(frob_dist_raw(&a.data, &b.data))
}

pub(crate) fn frob_dist_raw(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn min_eigenvalue(m: &SpdMatrix) -> f64 {
    symmetric_eigenvalues(m.dim, &m.data)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of a symmetric matrix (ascending) by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(n: usize, m: &[f64]) -> Vec<f64> {
    assert_eq!(m.len(), n * n, "matrix must be {n}x{n}");
    let scale = m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    debug_assert!(
        (0..n).all(|i| (0..i).all(|j| (m[i * n + j] - m[j * n + i]).abs()
            <= 1e-9 * scale.max(1.0))),
        "symmetric input required"
    );
    let mut a = m.to_vec();
    symmetrize(n, &mut a);
    if scale == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= 1e-300_f64.max(f64::EPSILON * 1e-3 * scale) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    eig
}
