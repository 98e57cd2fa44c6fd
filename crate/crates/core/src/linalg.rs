//! Dense linear-algebra helpers used across the crate.
//!
//! Everything here operates on `nalgebra` dynamic matrices. The helpers fall
//! into three groups: vectorization/Kronecker utilities for turning matrix
//! fixed-point equations into linear solves, symmetric/Hermitian eigenvalue
//! routines for the watermark designers, and a small serde-friendly matrix
//! representation for configuration files.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Symmetric part `(M + Mᵀ)/2`.
pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Column-major vectorization `vec(M)`.
///
/// Pairs with [`kron`] through the identity `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.
pub fn vec_mat(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_mat`]: reshape a stacked column vector into a matrix.
pub fn unvec_mat(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), rows * cols, "unvec_mat: length mismatch");
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Largest eigenvalue modulus of a (generally non-symmetric) matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Whether `M` is symmetric up to `tol` in the max-abs sense.
pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let d = m - m.transpose();
    d.iter().all(|x| x.abs() <= tol)
}

/// Validate that `m` is a covariance matrix: square, symmetric, and positive
/// semidefinite up to a scale-relative tolerance.
pub fn check_covariance(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidModel(format!(
            "{name} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.iter().map(|x| x.abs()).fold(1.0, f64::max);
    if !is_symmetric(m, 1e-9 * scale) {
        return Err(Error::InvalidModel(format!("{name} is not symmetric")));
    }
    let eig = m.clone().symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-9 * scale {
        return Err(Error::InvalidModel(format!(
            "{name} has negative eigenvalue {min:.3e}"
        )));
    }
    Ok(())
}

/// Symmetric positive-semidefinite square root via eigendecomposition.
///
/// Eigenvalues in `[-tol, 0)` are clamped to zero so covariances that are
/// PSD only up to rounding still factor.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = m.iter().map(|x| x.abs()).fold(1.0, f64::max);
    let eig = sym(m).symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-9 * scale {
            return Err(Error::InvalidModel(format!(
                "psd_sqrt: eigenvalue {v:.3e} is negative"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&vals);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Largest generalized eigenpair of the symmetric pair `(M, N)` with `N`
/// symmetric positive definite: returns `(λ_max, v)` with `M v = λ_max N v`.
///
/// Solved by reducing through the Cholesky factor `N = L Lᵀ` to an ordinary
/// symmetric problem on `L⁻¹ M L⁻ᵀ`. The eigenvector is unit-norm with its
/// largest-magnitude entry made positive, so results are deterministic.
pub fn generalized_max_eigen(m: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let dim = m.nrows();
    assert_eq!(m.ncols(), dim, "generalized_max_eigen: M must be square");
    assert_eq!(n.nrows(), dim, "generalized_max_eigen: dimension mismatch");
    assert_eq!(n.ncols(), dim, "generalized_max_eigen: N must be square");

    let chol = sym(n)
        .cholesky()
        .ok_or_else(|| Error::Singular("generalized eigenproblem weight (not SPD)".into()))?;
    let l = chol.l();

    // B = L⁻¹ M L⁻ᵀ, built from two triangular solves.
    let y = l
        .solve_lower_triangular(m)
        .ok_or_else(|| Error::Singular("triangular solve in generalized eigenproblem".into()))?;
    let b = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| Error::Singular("triangular solve in generalized eigenproblem".into()))?
        .transpose();

    let eig = sym(&b).symmetric_eigen();
    let (mut best, mut best_val) = (0, f64::NEG_INFINITY);
    for (i, &val) in eig.eigenvalues.iter().enumerate() {
        if val > best_val {
            best = i;
            best_val = val;
        }
    }
    let u = eig.eigenvectors.column(best).into_owned();

    // Back-transform v = L⁻ᵀ u and normalize deterministically.
    let mut v = l
        .transpose()
        .solve_upper_triangular(&u)
        .ok_or_else(|| Error::Singular("triangular solve in generalized eigenproblem".into()))?;
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::Singular("zero generalized eigenvector".into()));
    }
    v /= norm;
    let (mut pivot, mut pivot_abs) = (0, 0.0);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > pivot_abs {
            pivot = i;
            pivot_abs = x.abs();
        }
    }
    if v[pivot] < 0.0 {
        v = -v;
    }
    Ok((best_val, v))
}

/// Real symmetric embedding of a Hermitian matrix:
/// `M = X + jY ↦ [[X, -Y], [Y, X]]`.
///
/// For Hermitian `M` the embedding is symmetric, each eigenvalue of `M`
/// appears twice, and quadratic forms agree: `hᴴ M h = uᵀ E(M) u` for
/// `u = [Re h; Im h]`.
pub fn hermitian_embed(m: &DMatrix<Complex64>) -> DMatrix<f64> {
    let p = m.nrows();
    assert_eq!(m.ncols(), p, "hermitian_embed: M must be square");
    let mut e = DMatrix::zeros(2 * p, 2 * p);
    for i in 0..p {
        for j in 0..p {
            let z = m[(i, j)];
            e[(i, j)] = z.re;
            e[(i + p, j + p)] = z.re;
            e[(i, j + p)] = -z.im;
            e[(i + p, j)] = z.im;
        }
    }
    e
}

/// Reassemble a complex vector from its stacked real embedding
/// `u = [Re h; Im h]`.
pub fn complex_from_stacked(u: &DVector<f64>) -> DVector<Complex64> {
    let p = u.len() / 2;
    assert_eq!(u.len(), 2 * p, "complex_from_stacked: odd length");
    DVector::from_fn(p, |i, _| Complex64::new(u[i], u[i + p]))
}

/// Rotate a complex vector's global phase so its largest-magnitude entry is
/// real and positive. `h h^H` is invariant under this, so canonicalizing
/// makes designer output deterministic without changing the design.
pub fn canonicalize_phase(h: &DVector<Complex64>) -> DVector<Complex64> {
    let (mut pivot, mut pivot_abs) = (0, 0.0);
    for (i, z) in h.iter().enumerate() {
        if z.norm() > pivot_abs {
            pivot = i;
            pivot_abs = z.norm();
        }
    }
    if pivot_abs == 0.0 {
        return h.clone();
    }
    let phase = h[pivot].conj() / pivot_abs;
    h.map(|z| z * phase)
}

/// Serde-friendly dense matrix: row-major data plus explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    /// Entries in row-major order, `rows * cols` of them.
    pub data: Vec<f64>,
}

impl MatrixData {
    /// Convert to a dense matrix, checking the element count.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Config(format!(
                "matrix data has {} entries, expected {}x{}={}",
                self.data.len(),
                self.rows,
                self.cols,
                self.rows * self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }

    /// Capture a dense matrix in row-major form.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixData {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}
