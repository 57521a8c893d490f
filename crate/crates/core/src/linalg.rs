//! Dense symmetric positive definite linear algebra.
//!
//! Every `K_uu^{-1}` in the crate goes through [`SpdMatrix`], which keeps the
//! Cholesky factor of the (possibly jittered) matrix alongside the original
//! values. Jitter is relative to the mean diagonal so behavior does not depend
//! on the overall scale of the kernel.

use nalgebra::DMatrix;

use crate::error::{DeepGpError, Result};

/// Jitter multipliers tried in order, relative to the mean diagonal.
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// A dense lower-triangular matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular(DMatrix<f64>);

impl LowerTriangular {
    /// Wraps `values`, zeroing everything above the diagonal.
    pub fn new(mut values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(DeepGpError::dims(
                "lower triangular (square)",
                values.nrows(),
                values.ncols(),
            ));
        }
        values.fill_upper_triangle(0.0, 1);
        Ok(Self(values))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// `L L^T`.
    pub fn outer(&self) -> DMatrix<f64> {
        &self.0 * self.0.transpose()
    }

    /// True when every diagonal entry is strictly positive.
    pub fn has_positive_diagonal(&self) -> bool {
        self.0.diagonal().iter().all(|&d| d > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Solve `L X = B`.
    Lower,
    /// Solve `L^T X = B`.
    LowerTranspose,
}

/// A symmetric positive definite matrix with its cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    values: DMatrix<f64>,
    chol: LowerTriangular,
    jitter: f64,
    jitter_scale: f64,
}

impl SpdMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// The matrix as given, without jitter.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn chol(&self) -> &LowerTriangular {
        &self.chol
    }

    /// Absolute jitter added to the diagonal before factorization.
    pub fn jitter_applied(&self) -> f64 {
        self.jitter
    }

    /// Jitter as a multiple of the mean diagonal (the ladder rung that succeeded).
    pub fn jitter_scale(&self) -> f64 {
        self.jitter_scale
    }

    /// `(A + jI)^{-1} B` through two triangular solves.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let half = self
            .chol
            .0
            .solve_lower_triangular(rhs)
            .expect("cholesky factor has positive diagonal");
        self.chol
            .0
            .tr_solve_lower_triangular(&half)
            .expect("cholesky factor has positive diagonal")
    }

    /// Dense `(A + jI)^{-1}`, assembled column by column from Cholesky solves.
    pub fn inverse_from_cholesky(&self) -> DMatrix<f64> {
        let mut inv = self.solve(&DMatrix::identity(self.dim(), self.dim()));
        symmetrize(&mut inv);
        inv
    }

    pub fn log_det(&self) -> f64 {
        log_det(self)
    }
}

/// Smallest relative jitter applied to inducing-point covariances. Without it
/// a tightly packed `K_uu` can reach condition numbers near `1/ε`, where
/// `ψ0 - tr(K⁻¹Φ)` and `tr(K⁻¹S)` are dominated by roundoff.
pub const KUU_MIN_JITTER: f64 = 1e-8;

/// Factorizes `a + jI` for the smallest `j` on [`JITTER_LADDER`] that works.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<SpdMatrix> {
    cholesky_with_min_jitter(a, 0.0)
}

/// As [`cholesky_with_jitter`], starting the ladder at `min_rung`.
pub fn cholesky_with_min_jitter(a: &DMatrix<f64>, min_rung: f64) -> Result<SpdMatrix> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(DeepGpError::dims("cholesky (square, non-empty)", n.max(1), a.ncols()));
    }
    let scale = a.amax();
    let asymmetry = (a - a.transpose()).amax();
    if !asymmetry.is_finite() || asymmetry > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(DeepGpError::NotSymmetric { asymmetry });
    }
    let mean_diag = a.diagonal().mean();
    if !(mean_diag.is_finite() && mean_diag > 0.0) {
        return Err(DeepGpError::NotPositiveDefinite { max_jitter: 0.0 });
    }
    let rungs = std::iter::once(min_rung).chain(JITTER_LADDER.iter().copied().filter(|&r| r > min_rung));
    for rung in rungs {
        let jitter = rung * mean_diag;
        if let Some(chol) = factorize(a, jitter, mean_diag) {
            return Ok(SpdMatrix {
                values: a.clone(),
                chol: LowerTriangular(chol),
                jitter,
                jitter_scale: rung,
            });
        }
    }
    Err(DeepGpError::NotPositiveDefinite {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * mean_diag,
    })
}

// Plain Cholesky–Banachiewicz. Pivots at roundoff level count as failure so a
// singular PSD matrix moves up the jitter ladder instead of producing a
// factor with noise on its diagonal.
fn factorize(a: &DMatrix<f64>, jitter: f64, mean_diag: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let floor = n as f64 * f64::EPSILON * mean_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                let pivot = sum + jitter;
                if !(pivot.is_finite() && pivot > floor) {
                    return None;
                }
                l[(i, i)] = pivot.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

pub fn tri_solve(l: &LowerTriangular, b: &DMatrix<f64>, side: Side) -> Result<DMatrix<f64>> {
    if l.dim() != b.nrows() {
        return Err(DeepGpError::dims("tri_solve rows", l.dim(), b.nrows()));
    }
    let solved = match side {
        Side::Lower => l.0.solve_lower_triangular(b),
        Side::LowerTranspose => l.0.tr_solve_lower_triangular(b),
    };
    solved.ok_or(DeepGpError::NotPositiveDefinite { max_jitter: 0.0 })
}

/// `log det (A + jI)` from the Cholesky diagonal.
pub fn log_det(a: &SpdMatrix) -> f64 {
    2.0 * a.chol.0.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
