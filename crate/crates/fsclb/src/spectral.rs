//! Dense linear-algebra kernel: thin SVD, PSD ordering tests and the
//! spectral-tail error used by the sketch bounds.
//!
//! Everything here is a pure function over [`DenseMatrix`] values.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;
pub type DenseVector = DVector<f64>;

/// Economy-size SVD `A = U diag(σ) Vᵀ` with `σ` sorted nonincreasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut scaled = self.u.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * &self.vt
    }
}

fn ensure_finite(a: &DenseMatrix, what: &str) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidMatrix(format!("{what}: empty matrix")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix(format!("{what}: non-finite entry")));
    }
    Ok(())
}

fn to_faer(a: &DenseMatrix) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn svd_failed(e: faer::linalg::svd::SvdError) -> Error {
    Error::InvalidMatrix(format!("SVD did not converge: {e:?}"))
}

pub fn thin_svd(a: &DenseMatrix) -> Result<SvdResult> {
    ensure_finite(a, "thin_svd")?;
    let svd = to_faer(a).thin_svd().map_err(svd_failed)?;
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let k = s.dim();
    Ok(SvdResult {
        u: DenseMatrix::from_fn(a.nrows(), k, |i, j| u[(i, j)]),
        singular_values: (0..k).map(|i| s[i]).collect(),
        vt: DenseMatrix::from_fn(k, a.ncols(), |i, j| v[(j, i)]),
    })
}

/// Singular values only, sorted nonincreasing.
pub fn singular_values(a: &DenseMatrix) -> Result<Vec<f64>> {
    ensure_finite(a, "singular_values")?;
    to_faer(a).singular_values().map_err(svd_failed)
}

/// Eigenvalues of a symmetric matrix, sorted nonincreasing.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>> {
    ensure_finite(a, "symmetric_eigenvalues")?;
    if !a.is_square() {
        return Err(Error::InvalidMatrix(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let sym = (a + a.transpose()) * 0.5;
    let mut eigs: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    eigs.sort_by(|x, y| y.total_cmp(x));
    Ok(eigs)
}

/// `A ⪰ B` up to `tol·(1 + ‖A‖₂)` on the smallest eigenvalue of `A − B`.
pub fn psd_dominates(a: &DenseMatrix, b: &DenseMatrix, tol: f64) -> Result<bool> {
    let (min_eig, norm_a) = psd_margin(a, b)?;
    Ok(min_eig >= -tol * (1.0 + norm_a))
}

/// Returns `(λ_min(A − B), ‖A‖₂)`; the first is the residual a failed
/// dominance check reports.
pub fn psd_margin(a: &DenseMatrix, b: &DenseMatrix) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidMatrix(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let diff = symmetric_eigenvalues(&(a - b))?;
    let norm_a = symmetric_eigenvalues(a)?
        .iter()
        .fold(0.0_f64, |m, e| m.max(e.abs()));
    Ok((*diff.last().unwrap(), norm_a))
}

/// Index convention for the spectral error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TailConvention {
    /// Sum of eigenvalues strictly below the top `k`.
    #[default]
    BeyondTopK,
    /// Literal reading: the `k + 1` smallest eigenvalues.
    SmallestKPlusOne,
}

/// `ε_l = min_{k<l} tail_k / (λ (l − k))` over a nonincreasing spectrum.
pub fn spectral_error(eigs: &[f64], lambda: f64, l: usize) -> Result<f64> {
    spectral_error_with(eigs, lambda, l, TailConvention::BeyondTopK)
}

pub fn spectral_error_with(
    eigs: &[f64],
    lambda: f64,
    l: usize,
    convention: TailConvention,
) -> Result<f64> {
    let d = eigs.len();
    if lambda <= 0.0 {
        return Err(Error::InvalidRegularizer(lambda));
    }
    if l == 0 || l > d {
        return Err(Error::InvalidSpectrum(format!(
            "sketch size {l} outside 1..={d}"
        )));
    }
    let scale = eigs.iter().fold(1.0_f64, |m, e| m.max(e.abs()));
    let mut clipped = Vec::with_capacity(d);
    for (i, &e) in eigs.iter().enumerate() {
        if !e.is_finite() || e < -1e-10 * scale {
            return Err(Error::InvalidSpectrum(format!("eigenvalue {i} is {e}")));
        }
        if i > 0 && e > eigs[i - 1] + 1e-12 * scale {
            return Err(Error::InvalidSpectrum("spectrum is not nonincreasing".into()));
        }
        // roundoff band around zero, same width on both sides
        clipped.push(if e.abs() <= 1e-10 * scale { 0.0 } else { e });
    }
    let mut best = f64::INFINITY;
    for k in 0..l {
        let tail: f64 = match convention {
            TailConvention::BeyondTopK => clipped[k..].iter().sum(),
            TailConvention::SmallestKPlusOne => clipped[d - k - 1..].iter().sum(),
        };
        best = best.min(tail / (lambda * (l - k) as f64));
    }
    Ok(best)
}

/// Log-determinant of a symmetric positive-definite matrix via Cholesky.
pub fn spd_log_det(a: &DenseMatrix) -> Result<f64> {
    let chol = nalgebra::Cholesky::new(a.clone())
        .ok_or_else(|| Error::InvalidState("matrix is not positive definite".into()))?;
    Ok(chol.ln_determinant())
}

/// Sum of outer products of the rows of `rows`, i.e. `RᵀR`.
pub fn gram(rows: &DenseMatrix) -> DenseMatrix {
    rows.transpose() * rows
}

/// `[top; bottom]`, stacking rows.
pub fn vstack(top: &DenseMatrix, bottom: &DenseMatrix) -> DenseMatrix {
    debug_assert_eq!(top.ncols(), bottom.ncols());
    let mut out = DenseMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}
