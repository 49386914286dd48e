//! Symmetric PSD linear algebra and Gaussian-summary arithmetic.
//!
//! Every matrix function here goes through a symmetric eigendecomposition.
//! Eigenvalues below zero (round-off on rank-deficient inputs) are clamped
//! to zero before any square root is taken.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-8;
const SINGULAR_TOL: f64 = 1e-12;

/// Divisor used when forming a covariance from `m` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovForm {
    /// Divide by `m`.
    #[default]
    Population,
    /// Divide by `m - 1` (falls back to `m` for a single sample).
    Sample,
}

impl CovForm {
    pub fn divisor(self, m: usize) -> f64 {
        match self {
            CovForm::Population => m as f64,
            CovForm::Sample => (m.max(2) - 1) as f64,
        }
    }
}

/// Per-class knowledge: mean, covariance and the number of samples summarized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::dims(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }
}

/// Mean and ridged population covariance of a list of vectors.
pub fn estimate_gaussian(vectors: &[DVector<f64>], ridge: f64) -> Result<GaussianSummary> {
    let first = vectors.first().ok_or(Error::NoSamples)?;
    let d = first.len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
        return Err(Error::dims(format!(
            "vector of length {} among vectors of length {d}",
            bad.len()
        )));
    }
    let rows = DMatrix::from_fn(vectors.len(), d, |i, j| vectors[i][j]);
    estimate_gaussian_rows_with(&rows, ridge, CovForm::Population)
}

/// Same as [`estimate_gaussian`], for samples stored as the rows of a matrix.
pub fn estimate_gaussian_rows(rows: &DMatrix<f64>, ridge: f64) -> Result<GaussianSummary> {
    estimate_gaussian_rows_with(rows, ridge, CovForm::Population)
}

pub fn estimate_gaussian_rows_with(
    rows: &DMatrix<f64>,
    ridge: f64,
    form: CovForm,
) -> Result<GaussianSummary> {
    let m = rows.nrows();
    if m == 0 {
        return Err(Error::NoSamples);
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let d = rows.ncols();
    let mean: DVector<f64> = rows.row_sum().transpose() / m as f64;
    let mut centered = rows.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / form.divisor(m);
    symmetrize(&mut cov);
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    Ok(GaussianSummary {
        mean,
        cov,
        count: m,
    })
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn check_symmetric(s: &DMatrix<f64>) -> Result<()> {
    if !s.is_square() {
        return Err(Error::dims(format!(
            "expected a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = s.amax().max(1.0);
    let asym = (s - s.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Eigendecomposition of a symmetric PSD matrix with negative eigenvalues
/// clamped to zero. Carries what the square root and its derivative need.
#[derive(Debug, Clone)]
pub struct PsdEigen {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl PsdEigen {
    pub fn new(s: &DMatrix<f64>) -> Result<Self> {
        check_symmetric(s)?;
        let mut sym = s.clone();
        symmetrize(&mut sym);
        let eig = SymmetricEigen::new(sym);
        let values = eig.eigenvalues.map(|v| v.max(0.0));
        Ok(Self {
            vectors: eig.eigenvectors,
            values,
        })
    }

    fn reassemble(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * f(self.values[j])
        });
        let mut out = scaled * self.vectors.transpose();
        symmetrize(&mut out);
        out
    }

    pub fn sqrt(&self) -> DMatrix<f64> {
        self.reassemble(f64::sqrt)
    }

    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        self.reassemble(|v| 1.0 / v.sqrt())
    }

    pub fn min_value(&self) -> f64 {
        self.values.min()
    }

    /// Adjoint of the derivative of `S -> S^{1/2}`: maps an upstream
    /// gradient `g = dL/d(S^{1/2})` to `dL/dS`.
    ///
    /// In the eigenbasis the divided difference of `sqrt` is
    /// `1 / (sqrt(l_i) + sqrt(l_j))`, which is well defined for repeated
    /// eigenvalues.
    pub fn sqrt_pullback(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let v = &self.vectors;
        let mut inner = v.transpose() * g * v;
        let roots = self.values.map(f64::sqrt);
        let n = roots.len();
        for i in 0..n {
            for j in 0..n {
                let denom = roots[i] + roots[j];
                inner[(i, j)] = if denom > 0.0 { inner[(i, j)] / denom } else { 0.0 };
            }
        }
        let mut out = v * inner * v.transpose();
        symmetrize(&mut out);
        out
    }
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrtm_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(PsdEigen::new(s)?.sqrt())
}

fn check_same_dim(a: &GaussianSummary, b: &GaussianSummary) -> Result<()> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(Error::dims(format!(
            "summaries of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Squared 2-Wasserstein (Bures) distance between two Gaussians.
pub fn bures_w2_sq(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    check_same_dim(a, b)?;
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let sa = sqrtm_psd(&a.cov)?;
    let mut cross = &sa * &b.cov * &sa;
    symmetrize(&mut cross);
    let cross_root = sqrtm_psd(&cross)?;
    let cov_term = a.cov.trace() + b.cov.trace() - 2.0 * cross_root.trace();
    Ok((mean_term + cov_term).max(0.0))
}

/// `||mu_a - mu_r||^2 + ||Sigma_a^{1/2} - Sigma_r^{1/2}||_F^2`.
///
/// Agrees with [`bures_w2_sq`] when the covariances commute.
pub fn collaborative_value(a: &GaussianSummary, r: &GaussianSummary) -> Result<f64> {
    check_same_dim(a, r)?;
    let mean_term = (&a.mean - &r.mean).norm_squared();
    let diff = sqrtm_psd(&a.cov)? - sqrtm_psd(&r.cov)?;
    Ok(mean_term + diff.norm_squared())
}

/// Optimal transport map between centered Gaussians: the symmetric `T` with
/// `T src T = dst`.
pub fn transport_map(src: &DMatrix<f64>, dst: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if src.shape() != dst.shape() {
        return Err(Error::dims(format!(
            "source {:?} vs destination {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    let eig = PsdEigen::new(src)?;
    check_symmetric(dst)?;
    let lmax = eig.values.max().max(1.0);
    let lmin = eig.min_value();
    if lmin <= SINGULAR_TOL * lmax {
        return Err(Error::IllConditioned(lmin));
    }
    let root = eig.sqrt();
    let inv_root = eig.inv_sqrt();
    let mut middle = &root * dst * &root;
    symmetrize(&mut middle);
    let mut t = &inv_root * sqrtm_psd(&middle)? * &inv_root;
    symmetrize(&mut t);
    Ok(t)
}

/// `sqrt((z1 - z2)^T cov_inv (z1 - z2))`.
pub fn mahalanobis(z1: &DVector<f64>, z2: &DVector<f64>, cov_inv: &DMatrix<f64>) -> Result<f64> {
    if z1.len() != z2.len() || cov_inv.nrows() != z1.len() || cov_inv.ncols() != z1.len() {
        return Err(Error::dims(format!(
            "vectors of length {} and {} with a {}x{} metric",
            z1.len(),
            z2.len(),
            cov_inv.nrows(),
            cov_inv.ncols()
        )));
    }
    let diff = z1 - z2;
    let q = diff.dot(&(cov_inv * &diff));
    Ok(q.max(0.0).sqrt())
}
