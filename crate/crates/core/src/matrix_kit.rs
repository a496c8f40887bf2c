//! Dense-matrix helpers: symmetric vectorizations, duplication matrices,
//! discrete Lyapunov solves and spectral tests.
//!
//! The `vecs` ordering (row by row over the upper triangle) is shared with
//! [`crate::data_driven`]; changing it breaks every data operator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetric value matrix `P` of a policy or of the game.
pub type CostMatrix = DMatrix<f64>;

/// A matrix counts as stable when its spectral radius is below `1 - STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Relative asymmetry tolerated before a "symmetric" input is rejected.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Kronecker Lyapunov solves are used up to this dimension; larger problems
/// use squared Smith iteration.
// TODO: switch the large-n path to a real Schur (Bartels-Stewart) solver.
pub const KRONECKER_MAX_DIM: usize = 20;

/// `n (n + 1) / 2`.
pub fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of `(i, j)`, `i <= j`, inside `vecs` of an `n x n` matrix.
pub fn vecs_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * n - i * (i + 1) / 2 + j
}

/// Upper triangle of a symmetric matrix stacked row by row:
/// `p11, p12, .., p1n, p22, .., pnn`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymVec {
    entries: DVector<f64>,
    dim: usize,
}

impl SymVec {
    pub fn from_entries(dim: usize, entries: DVector<f64>) -> Result<Self> {
        if entries.len() != sym_len(dim) {
            return Err(Error::InvalidArgument(format!(
                "vecs of a {dim}x{dim} matrix needs {} entries, got {}",
                sym_len(dim),
                entries.len()
            )));
        }
        Ok(Self { entries, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &DVector<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DVector<f64> {
        self.entries
    }

    /// Inverse of [`vecs`].
    pub fn to_matrix(&self) -> DMatrix<f64> {
        unvecs(self.dim, self.entries.as_slice())
    }
}

/// Rebuilds a symmetric matrix from its `vecs` entries.
pub fn unvecs(dim: usize, entries: &[f64]) -> DMatrix<f64> {
    assert_eq!(entries.len(), sym_len(dim), "vecs length mismatch");
    let mut out = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in i..dim {
            out[(i, j)] = entries[k];
            out[(j, i)] = entries[k];
            k += 1;
        }
    }
    out
}

/// `(X + X^T) / 2`.
pub fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

/// Symmetrizes `x` after checking that its asymmetry is within [`SYMMETRY_TOL`].
pub fn symmetrize_checked(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !x.is_square() {
        return Err(Error::InvalidArgument(format!(
            "expected a square matrix, got {}x{}",
            x.nrows(),
            x.ncols()
        )));
    }
    let skew = (x - x.transpose()).norm();
    if skew > SYMMETRY_TOL * x.norm().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "matrix is not symmetric (|X - X^T|_F = {skew:e})"
        )));
    }
    Ok(symmetrize(x))
}

pub fn vecs(x: &DMatrix<f64>) -> Result<SymVec> {
    let x = symmetrize_checked(x)?;
    let n = x.nrows();
    let mut entries = DVector::zeros(sym_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            entries[k] = x[(i, j)];
            k += 1;
        }
    }
    Ok(SymVec { entries, dim: n })
}

/// `[a1^2, 2 a1 a2, .., 2 a1 an, a2^2, 2 a2 a3, .., an^2]`, so that
/// `vecv(a)^T vecs(X) = a^T X a`.
pub fn vecv(a: &DVector<f64>) -> DVector<f64> {
    let n = a.len();
    let mut out = DVector::zeros(sym_len(n));
    let mut k = 0;
    for i in 0..n {
        out[k] = a[i] * a[i];
        k += 1;
        for j in i + 1..n {
            out[k] = 2.0 * a[i] * a[j];
            k += 1;
        }
    }
    out
}

/// Column-major `vec(X)`.
pub fn vec(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

/// Duplication matrix `T_n` with `vec(X) = T_n vecs(X)` for symmetric `X`,
/// together with its pseudo-inverse.
#[derive(Debug, Clone)]
pub struct DuplicationMatrix {
    dim: usize,
    matrix: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl DuplicationMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `T_n`, `n^2 x n(n+1)/2`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `T_n^+ = (T_n^T T_n)^{-1} T_n^T`.
    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    /// Diagonal of `T_n^T T_n`: 1 for diagonal entries, 2 for off-diagonal ones.
    pub fn gram_diagonal(&self) -> DVector<f64> {
        let n = self.dim;
        let mut out = DVector::zeros(sym_len(n));
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                out[k] = if i == j { 1.0 } else { 2.0 };
                k += 1;
            }
        }
        out
    }
}

pub fn duplication(n: usize) -> DuplicationMatrix {
    assert!(n >= 1, "duplication matrix needs n >= 1");
    let cols = sym_len(n);
    let mut matrix = DMatrix::zeros(n * n, cols);
    let mut pinv = DMatrix::zeros(cols, n * n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            matrix[(j * n + i, k)] = 1.0;
            matrix[(i * n + j, k)] = 1.0;
            if i == j {
                pinv[(k, i * n + i)] = 1.0;
            } else {
                pinv[(k, j * n + i)] = 0.5;
                pinv[(k, i * n + j)] = 0.5;
            }
            k += 1;
        }
    }
    DuplicationMatrix {
        dim: n,
        matrix,
        pinv,
    }
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::InvalidArgument(format!(
            "spectral radius of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entries".into()));
    }
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

pub fn is_stable(a: &DMatrix<f64>) -> bool {
    matches!(spectral_radius(a), Ok(r) if r < 1.0 - STABILITY_MARGIN)
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(x: &DMatrix<f64>) -> DVector<f64> {
    let mut ev = SymmetricEigen::new(symmetrize(x)).eigenvalues;
    ev.as_mut_slice().sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(x: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(x)[0]
}

pub fn max_eigenvalue(x: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(x);
    ev[ev.len() - 1]
}

/// `lambda_min(X) >= -tol`.
pub fn is_psd(x: &DMatrix<f64>, tol: f64) -> bool {
    x.nrows() == 0 || min_eigenvalue(x) >= -tol
}

/// Strict definiteness with the crate-wide margin `lambda_min > 1e-9 |X|`.
pub fn is_pd(x: &DMatrix<f64>) -> bool {
    x.nrows() == 0 || min_eigenvalue(x) > 1e-9 * x.norm().max(f64::MIN_POSITIVE)
}

/// Solves `A^T P A - P + Q = 0` for stable `A`.
pub fn solve_dlyap(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<CostMatrix> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) {
        return Err(Error::InvalidArgument(format!(
            "Lyapunov dimensions: A {}x{}, Q {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let q = symmetrize_checked(q)?;
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::UnstableMatrix {
            spectral_radius: rho,
        });
    }
    let p = if n <= KRONECKER_MAX_DIM {
        dlyap_kronecker(a, &q)?
    } else {
        dlyap_smith(a, &q, rho)?
    };
    Ok(p)
}

fn dlyap_kronecker(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<CostMatrix> {
    let n = a.nrows();
    let at = a.transpose();
    let mut op = at.kronecker(&at);
    for k in 0..n * n {
        op[(k, k)] -= 1.0;
    }
    let lu = op.lu();
    let solve = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let v = lu.solve(&-vec(rhs)).ok_or_else(|| {
            Error::IllConditioned("Lyapunov operator is singular (eigenvalue product near 1)".into())
        })?;
        Ok(symmetrize(&DMatrix::from_column_slice(n, n, v.as_slice())))
    };
    let mut p = solve(q)?;
    // one step of iterative refinement
    let residual = lyap_residual(a, &p, q);
    let correction = solve(&residual)?;
    p += correction;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned("non-finite Lyapunov solution".into()));
    }
    Ok(p)
}

fn dlyap_smith(a: &DMatrix<f64>, q: &DMatrix<f64>, rho: f64) -> Result<CostMatrix> {
    let mut p = q.clone();
    let mut ak = a.clone();
    // rho^(2^k) must vanish in double precision
    let needed = ((-52.0 * std::f64::consts::LN_2) / rho.max(1e-300).ln()).log2().ceil() as usize + 2;
    for _ in 0..needed.clamp(1, 64) {
        p += ak.transpose() * &p * &ak;
        ak = &ak * &ak;
        if ak.norm() < 1e-300 {
            break;
        }
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned("Smith iteration overflowed".into()));
    }
    Ok(symmetrize(&p))
}

/// `A^T P A - P + Q`.
pub fn lyap_residual(a: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * p * a - p + q
}

/// Moore-Penrose pseudo-inverse discarding singular values below
/// `rel_cutoff * sigma_max`. Returns the inverse and the retained rank.
pub fn pinv(m: &DMatrix<f64>, rel_cutoff: f64) -> Result<(DMatrix<f64>, usize)> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = rel_cutoff * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let inv = svd
        .pseudo_inverse(cutoff.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((inv, rank))
}

/// Symmetric PSD square root through the eigendecomposition; negative
/// eigenvalues (round-off) are clipped to zero.
pub fn psd_sqrt(x: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(x));
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}
