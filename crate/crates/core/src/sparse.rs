//! Single-layer sparse GP with inducing variables.
//!
//! All bounds handle `D` output columns that share one `S = LLᵀ`; every
//! trace penalty therefore carries a factor `D`. The trace coefficient is
//! `1/(2σ²)` throughout.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DeepGpError, Result};
use crate::kernels::{gram, gram_diag, KernelSpec};
use crate::linalg::{
    cholesky_with_jitter, cholesky_with_min_jitter, log_det, tri_solve, LowerTriangular, Side, SpdMatrix,
    KUU_MIN_JITTER,
};
use crate::report::BoundReport;

/// One sparse GP layer: inducing inputs, `q(u) = N(M, LLᵀ)` per output column, noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayer {
    pub kernel: KernelSpec,
    /// `m × Q_in`
    pub z: DMatrix<f64>,
    /// `m × Q_out`
    pub mean: DMatrix<f64>,
    /// `m × m`, lower triangular with positive diagonal
    pub chol: DMatrix<f64>,
    pub noise_var: f64,
}

impl VariationalLayer {
    pub fn new(
        kernel: KernelSpec,
        z: DMatrix<f64>,
        mean: DMatrix<f64>,
        chol: LowerTriangular,
        noise_var: f64,
    ) -> Result<Self> {
        let layer = Self {
            kernel,
            z,
            mean,
            chol: chol.as_matrix().clone(),
            noise_var,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.z.nrows();
        if m == 0 {
            return Err(DeepGpError::dims("inducing points", 1, 0));
        }
        self.kernel.check_cols(&self.z, "inducing input columns")?;
        if self.mean.nrows() != m {
            return Err(DeepGpError::dims("variational mean rows", m, self.mean.nrows()));
        }
        if self.mean.ncols() == 0 {
            return Err(DeepGpError::dims("output columns", 1, 0));
        }
        if self.chol.nrows() != m || self.chol.ncols() != m {
            return Err(DeepGpError::dims("variational factor size", m, self.chol.nrows()));
        }
        for i in 0..m {
            if !(self.chol[(i, i)] > 0.0) {
                return Err(DeepGpError::InvalidModel(format!(
                    "variational factor diagonal entry {i} must be positive"
                )));
            }
            for j in i + 1..m {
                if self.chol[(i, j)] != 0.0 {
                    return Err(DeepGpError::InvalidModel(
                        "variational factor must be lower triangular".into(),
                    ));
                }
            }
        }
        if !(self.noise_var.is_finite() && self.noise_var > 0.0) {
            return Err(DeepGpError::NonPositiveHyperparameter {
                name: "noise variance",
                value: self.noise_var,
            });
        }
        if self
            .z
            .iter()
            .chain(self.mean.iter())
            .chain(self.chol.iter())
            .any(|v| !v.is_finite())
        {
            return Err(DeepGpError::InvalidModel("layer parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn chol_factor(&self) -> LowerTriangular {
        LowerTriangular::new(self.chol.clone()).expect("square by validation")
    }

    /// `S = LLᵀ`.
    pub fn s(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    /// `K_uu`, factorized with at least [`KUU_MIN_JITTER`] relative jitter.
    pub fn kuu(&self) -> Result<SpdMatrix> {
        cholesky_with_min_jitter(&gram(&self.kernel, &self.z, &self.z)?, KUU_MIN_JITTER)
    }

    fn check_data(&self, x: &DMatrix<f64>, y: Option<&DMatrix<f64>>) -> Result<()> {
        self.validate()?;
        self.kernel.check_cols(x, "input columns")?;
        if let Some(y) = y {
            if y.nrows() != x.nrows() {
                return Err(DeepGpError::dims("target rows", x.nrows(), y.nrows()));
            }
            if y.ncols() != self.output_dim() {
                return Err(DeepGpError::dims("target columns", self.output_dim(), y.ncols()));
            }
        }
        Ok(())
    }
}

/// Total conditional variance `tr(K_ff - K_fu K_uu⁻¹ K_uf)` and its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct TcvReport {
    pub trace_sigma: f64,
    pub per_datum: Vec<f64>,
}

fn half_projection(kuu: &SpdMatrix, kfu: &DMatrix<f64>) -> DMatrix<f64> {
    // V = L⁻¹ K_uf, so K_fu K⁻¹ K_uf = VᵀV
    tri_solve(kuu.chol(), &kfu.transpose(), Side::Lower).expect("shapes agree")
}

pub fn tcv(layer: &VariationalLayer, x: &DMatrix<f64>) -> Result<TcvReport> {
    layer.check_data(x, None)?;
    let kuu = layer.kuu()?;
    let kfu = gram(&layer.kernel, x, &layer.z)?;
    let v = half_projection(&kuu, &kfu);
    let diag = gram_diag(&layer.kernel, x)?;
    let per_datum: Vec<f64> = diag
        .iter()
        .enumerate()
        .map(|(i, d)| d - v.column(i).norm_squared())
        .collect();
    Ok(TcvReport {
        trace_sigma: per_datum.iter().sum(),
        per_datum,
    })
}

fn gaussian_log_density(residual: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * residual * residual / var
}

/// `Σ_d log N(y_d | K_fu K⁻¹ u_d, σ²I) - D/(2σ²) tr Σ` with `u = layer.mean`.
pub fn conditional_bound(layer: &VariationalLayer, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    layer.check_data(x, Some(y))?;
    let kuu = layer.kuu()?;
    let kfu = gram(&layer.kernel, x, &layer.z)?;
    let mu = &kfu * kuu.solve(&layer.mean);
    let fit: f64 = y
        .iter()
        .zip(mu.iter())
        .map(|(yv, mv)| gaussian_log_density(yv - mv, layer.noise_var))
        .sum();
    let tcv = tcv(layer, x)?.trace_sigma;
    Ok(fit - layer.output_dim() as f64 / (2.0 * layer.noise_var) * tcv)
}

/// Collapsed bound: `Σ_d log N(y_d | 0, Q_ff + σ²I) - D/(2σ²) tr Σ` via the
/// `m × m` Woodbury route. Ignores `mean` and `chol`.
pub fn collapsed_bound(layer: &VariationalLayer, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    layer.check_data(x, Some(y))?;
    let n = x.nrows() as f64;
    let m = layer.num_inducing();
    let sigma2 = layer.noise_var;
    let kuu = layer.kuu()?;
    let kfu = gram(&layer.kernel, x, &layer.z)?;
    let v = half_projection(&kuu, &kfu);
    let b = DMatrix::identity(m, m) + (&v * v.transpose()) / sigma2;
    let b = cholesky_with_jitter(&b)?;
    let logdet = n * sigma2.ln() + log_det(&b);
    let mut total = 0.0;
    for d in 0..y.ncols() {
        let yd = y.column(d);
        let vy = &v * yd;
        let c = tri_solve(b.chol(), &DMatrix::from_column_slice(m, 1, vy.as_slice()), Side::Lower)?;
        let quad = yd.norm_squared() / sigma2 - c.norm_squared() / (sigma2 * sigma2);
        total += -0.5 * n * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * quad;
    }
    let diag = gram_diag(&layer.kernel, x)?;
    let trace_sigma: f64 = diag
        .iter()
        .enumerate()
        .map(|(i, d)| d - v.column(i).norm_squared())
        .sum();
    Ok(total - y.ncols() as f64 / (2.0 * sigma2) * trace_sigma)
}

/// `Σ_d KL(N(m_d, S) ‖ N(0, K_uu))`.
pub fn kl_gaussian(mean: &DMatrix<f64>, chol: &LowerTriangular, kuu: &SpdMatrix) -> Result<f64> {
    let m = kuu.dim();
    if mean.nrows() != m {
        return Err(DeepGpError::dims("kl mean rows", m, mean.nrows()));
    }
    if chol.dim() != m {
        return Err(DeepGpError::dims("kl factor size", m, chol.dim()));
    }
    let d = mean.ncols() as f64;
    let trace = tri_solve(kuu.chol(), chol.as_matrix(), Side::Lower)?.norm_squared();
    let maha = tri_solve(kuu.chol(), mean, Side::Lower)?.norm_squared();
    let logdet_s: f64 = 2.0 * chol.as_matrix().diagonal().iter().map(|v| v.abs().ln()).sum::<f64>();
    Ok(0.5 * (d * trace + maha - d * m as f64 + d * log_det(kuu) - d * logdet_s))
}

/// Uncollapsed bound with explicit `q(u)`; data terms decompose per datum.
pub fn svi_bound(layer: &VariationalLayer, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<BoundReport> {
    layer.check_data(x, Some(y))?;
    let sigma2 = layer.noise_var;
    let dcols = layer.output_dim() as f64;
    let kuu = layer.kuu()?;
    let kfu = gram(&layer.kernel, x, &layer.z)?;
    let a = kuu.solve(&layer.mean);
    let mu = &kfu * &a;
    // rows of K_fu K⁻¹ L give the per-datum S trace term
    let proj = tri_solve(kuu.chol(), &layer.chol, Side::Lower)?;
    let proj = tri_solve(kuu.chol(), &proj, Side::LowerTranspose)?;
    let spread = &kfu * proj;
    let v = half_projection(&kuu, &kfu);
    let diag = gram_diag(&layer.kernel, x)?;
    let n = x.nrows();
    let mut fit = 0.0;
    let mut trace = 0.0;
    let mut tcv_total = 0.0;
    let mut per_datum = Vec::with_capacity(n);
    for i in 0..n {
        let mut fit_i = 0.0;
        for d in 0..y.ncols() {
            fit_i += gaussian_log_density(y[(i, d)] - mu[(i, d)], sigma2);
        }
        let trace_i = dcols / (2.0 * sigma2) * spread.row(i).norm_squared();
        let tcv_i = dcols / (2.0 * sigma2) * (diag[i] - v.column(i).norm_squared());
        fit += fit_i;
        trace += trace_i;
        tcv_total += tcv_i;
        per_datum.push(fit_i - trace_i - tcv_i);
    }
    let kl = kl_gaussian(&layer.mean, &layer.chol_factor(), &kuu)?;
    let likelihood = fit - trace;
    Ok(BoundReport {
        total: likelihood - kl - tcv_total,
        likelihood_term: likelihood,
        likelihood_fit: fit,
        likelihood_trace: trace,
        kl_terms: vec![kl],
        compression_terms: vec![tcv_total],
        propagation_terms: vec![],
        per_datum_partials: per_datum,
        clamp_events: 0,
    })
}

/// Largest `n` accepted by [`exact_gp_lml`].
pub const EXACT_GP_LIMIT: usize = 2000;

/// `Σ_d log N(y_d | 0, K_ff + σ²I)`. A dense O(n³) oracle.
pub fn exact_gp_lml(kernel: &KernelSpec, noise_var: f64, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let n = x.nrows();
    if n > EXACT_GP_LIMIT {
        return Err(DeepGpError::GuardViolation {
            n,
            limit: EXACT_GP_LIMIT,
        });
    }
    if y.nrows() != n {
        return Err(DeepGpError::dims("target rows", n, y.nrows()));
    }
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(DeepGpError::NonPositiveHyperparameter {
            name: "noise variance",
            value: noise_var,
        });
    }
    let kff = gram(kernel, x, x)? + DMatrix::identity(n, n) * noise_var;
    let c = cholesky_with_jitter(&kff)?;
    let logdet = log_det(&c);
    let mut total = 0.0;
    for d in 0..y.ncols() {
        let yd = DVector::from_column_slice(y.column(d).as_slice());
        let half = tri_solve(c.chol(), &DMatrix::from_column_slice(n, 1, yd.as_slice()), Side::Lower)?;
        total += -0.5 * half.norm_squared() - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use crate::testing::random_layer;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_sigma(layer: &VariationalLayer, x: &DMatrix<f64>) -> DMatrix<f64> {
        let kuu = gram(&layer.kernel, &layer.z, &layer.z).unwrap();
        let kfu = gram(&layer.kernel, x, &layer.z).unwrap();
        let kff = gram(&layer.kernel, x, x).unwrap();
        let inv = kuu.try_inverse().unwrap();
        kff - &kfu * inv * kfu.transpose()
    }

    #[test]
    fn tcv_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = random_layer(KernelFamily::ExponentiatedQuadratic, 4, 2, 1, &mut rng);
        let x = DMatrix::from_fn(9, 2, |_, _| rng.random_range(-2.0..2.0));
        let report = tcv(&layer, &x).unwrap();
        let oracle = dense_sigma(&layer, &x).trace();
        assert_relative_eq!(report.trace_sigma, oracle, max_relative = 1e-8);
        assert_relative_eq!(report.per_datum.iter().sum::<f64>(), report.trace_sigma);
        assert!(report.per_datum.iter().all(|&v| v >= -1e-8 * layer.kernel.variance()));
    }

    #[test]
    fn tcv_vanishes_when_inducing_at_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = random_layer(KernelFamily::ExponentiatedQuadratic, 6, 1, 1, &mut rng);
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64 * 0.7 - 2.0);
        layer.z = x.clone();
        let report = tcv(&layer, &x).unwrap();
        assert!(report.trace_sigma.abs() <= 1e-6 * 6.0 * layer.kernel.variance());
    }

    #[test]
    fn tcv_far_inducing_point_is_uncorrelated() {
        let kernel = KernelSpec::exponentiated_quadratic(1.3, vec![0.5]).unwrap();
        let layer = VariationalLayer::new(
            kernel,
            dmatrix![100.0],
            dmatrix![0.0],
            LowerTriangular::identity(1),
            0.1,
        )
        .unwrap();
        let report = tcv(&layer, &dmatrix![0.0; 0.5; -0.3]).unwrap();
        for v in report.per_datum {
            assert_relative_eq!(v, 1.3, max_relative = 1e-12);
        }
    }

    #[test]
    fn empty_inducing_set_rejected() {
        let kernel = KernelSpec::exponentiated_quadratic(1.0, vec![1.0]).unwrap();
        let err = VariationalLayer::new(
            kernel,
            DMatrix::zeros(0, 1),
            DMatrix::zeros(0, 1),
            LowerTriangular::identity(0),
            0.1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn conditional_bound_by_hand() {
        // n = 2, m = 1, 1-D: k(x, z) = α exp(-(x - z)²/(2ℓ²)), K_uu = α
        let (alpha, ell, sigma2, z, u) = (1.4, 0.9, 0.2, 0.3, 0.8);
        let xs = [-0.5, 1.1];
        let ys = [0.4, -0.2];
        let kernel = KernelSpec::exponentiated_quadratic(alpha, vec![ell]).unwrap();
        let layer =
            VariationalLayer::new(kernel, dmatrix![z], dmatrix![u], LowerTriangular::identity(1), sigma2).unwrap();
        // K_uu carries the minimum jitter
        let kuu = alpha + layer.kuu().unwrap().jitter_applied();
        let mut expected = 0.0;
        for i in 0..2 {
            let kx: f64 = alpha * (-(xs[i] - z) * (xs[i] - z) / (2.0 * ell * ell)).exp();
            let mean = kx / kuu * u;
            let tcv = alpha - kx * kx / kuu;
            expected +=
                -0.5 * (2.0 * PI * sigma2).ln() - (ys[i] - mean).powi(2) / (2.0 * sigma2) - tcv / (2.0 * sigma2);
        }
        let got = conditional_bound(&layer, &dmatrix![xs[0]; xs[1]], &dmatrix![ys[0]; ys[1]]).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }

    #[test]
    fn conditional_bound_interpolation_limit() {
        let x = dmatrix![-1.0; 0.0; 1.2];
        let y = dmatrix![0.3, 1.0; -0.7, 0.2; 0.5, -0.4];
        let kernel = KernelSpec::exponentiated_quadratic(1.0, vec![0.4]).unwrap();
        let sigma2: f64 = 1e-4;
        let layer = VariationalLayer::new(kernel, x.clone(), y.clone(), LowerTriangular::identity(3), sigma2).unwrap();
        let got = conditional_bound(&layer, &x, &y).unwrap();
        let limit = -(6.0 / 2.0) * (2.0 * PI * sigma2).ln();
        // the K_uu jitter floor keeps this slightly off exact interpolation
        assert_relative_eq!(got, limit, max_relative = 1e-4);
    }

    #[test]
    fn conditional_trace_term_accounting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(KernelFamily::ExponentiatedQuadratic, 3, 1, 2, &mut rng);
        let x = DMatrix::from_fn(5, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let with_trace = conditional_bound(&layer, &x, &y).unwrap();
        let kuu = layer.kuu().unwrap();
        let mu = gram(&layer.kernel, &x, &layer.z).unwrap() * kuu.solve(&layer.mean);
        let fit: f64 = y
            .iter()
            .zip(mu.iter())
            .map(|(a, b)| gaussian_log_density(a - b, layer.noise_var))
            .sum();
        let trace = tcv(&layer, &x).unwrap().trace_sigma;
        assert_relative_eq!(
            with_trace - fit,
            -(2.0 / (2.0 * layer.noise_var)) * trace,
            max_relative = 1e-12
        );
    }

    #[test]
    fn exact_lml_scalar_case() {
        let kernel = KernelSpec::exponentiated_quadratic(1.5, vec![1.0]).unwrap();
        let (sigma2, y) = (0.3, 0.7);
        let got = exact_gp_lml(&kernel, sigma2, &dmatrix![0.2], &dmatrix![y]).unwrap();
        let v = 1.5 + sigma2;
        let expected = -0.5 * (2.0 * PI * v).ln() - y * y / (2.0 * v);
        assert_relative_eq!(got, expected, max_relative = 1e-14);
    }

    #[test]
    fn exact_lml_guard() {
        let kernel = KernelSpec::exponentiated_quadratic(1.0, vec![1.0]).unwrap();
        let x = DMatrix::zeros(EXACT_GP_LIMIT + 1, 1);
        assert!(matches!(
            exact_gp_lml(&kernel, 0.1, &x, &x),
            Err(DeepGpError::GuardViolation { .. })
        ));
    }

    #[test]
    fn bounds_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(KernelFamily::ExponentiatedQuadratic, 4, 2, 2, &mut rng);
        let x = DMatrix::from_fn(8, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(8, 2, |_, _| rng.random_range(-1.0..1.0));
        let perm = [3, 7, 0, 5, 1, 6, 2, 4];
        let xp = x.select_rows(&perm);
        let yp = y.select_rows(&perm);
        let close = |a: f64, b: f64| assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        close(
            exact_gp_lml(&layer.kernel, layer.noise_var, &x, &y).unwrap(),
            exact_gp_lml(&layer.kernel, layer.noise_var, &xp, &yp).unwrap(),
        );
        close(
            collapsed_bound(&layer, &x, &y).unwrap(),
            collapsed_bound(&layer, &xp, &yp).unwrap(),
        );
        close(
            svi_bound(&layer, &x, &y).unwrap().total,
            svi_bound(&layer, &xp, &yp).unwrap().total,
        );
        close(
            conditional_bound(&layer, &x, &y).unwrap(),
            conditional_bound(&layer, &xp, &yp).unwrap(),
        );
    }

    #[test]
    fn collapsed_equals_exact_with_inducing_at_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = random_layer(KernelFamily::ExponentiatedQuadratic, 7, 1, 1, &mut rng);
        let x = DMatrix::from_fn(7, 1, |i, _| -1.5 + 0.5 * i as f64);
        let y = DMatrix::from_fn(7, 1, |_, _| rng.random_range(-1.0..1.0));
        layer.z = x.clone();
        let c = collapsed_bound(&layer, &x, &y).unwrap();
        let e = exact_gp_lml(&layer.kernel, layer.noise_var, &x, &y).unwrap();
        assert_relative_eq!(c, e, max_relative = 1e-6);
    }

    #[test]
    fn collapsed_is_strictly_below_exact_for_generic_inducing_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = random_layer(KernelFamily::ExponentiatedQuadratic, 6, 1, 1, &mut rng);
        let x = DMatrix::from_fn(6, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(6, 1, |_, _| rng.random_range(-1.0..1.0));
        let c = collapsed_bound(&layer, &x, &y).unwrap();
        let e = exact_gp_lml(&layer.kernel, layer.noise_var, &x, &y).unwrap();
        assert!(c < e - 1e-8, "{c} vs {e}");
    }

    #[test]
    fn svi_report_accounting_and_dominance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for cfg in 0..20 {
            let family = if cfg % 2 == 0 {
                KernelFamily::ExponentiatedQuadratic
            } else {
                KernelFamily::Linear
            };
            let q_in = rng.random_range(1..=3);
            let m = if family == KernelFamily::Linear {
                q_in
            } else {
                rng.random_range(1..=6)
            };
            let layer = random_layer(family, m, q_in, 2, &mut rng);
            let x = DMatrix::from_fn(12, q_in, |_, _| rng.random_range(-2.0..2.0));
            let y = DMatrix::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0));
            let r = svi_bound(&layer, &x, &y).unwrap();
            assert_relative_eq!(r.total, r.sum_of_terms(), max_relative = 1e-12);
            assert_relative_eq!(
                r.per_datum_partials.iter().sum::<f64>(),
                r.data_part(),
                max_relative = 1e-10
            );
            let c = collapsed_bound(&layer, &x, &y).unwrap();
            let e = exact_gp_lml(&layer.kernel, layer.noise_var, &x, &y).unwrap();
            assert!(r.total <= c + 1e-8, "svi {} collapsed {c}", r.total);
            assert!(c <= e + 1e-8, "collapsed {c} exact {e}");
        }
    }

    #[test]
    fn kl_vanishes_when_q_equals_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = random_layer(KernelFamily::ExponentiatedQuadratic, 4, 2, 3, &mut rng);
        let kuu = layer.kuu().unwrap();
        let kl = kl_gaussian(&DMatrix::zeros(4, 3), kuu.chol(), &kuu).unwrap();
        assert!(kl.abs() <= 1e-10);
    }

    #[test]
    fn kl_unit_shift() {
        let kuu = cholesky_with_jitter(&DMatrix::identity(3, 3)).unwrap();
        let mut mean = DMatrix::zeros(3, 2);
        mean[(0, 0)] = 1.0;
        mean[(0, 1)] = 1.0;
        let kl = kl_gaussian(&mean, &LowerTriangular::identity(3), &kuu).unwrap();
        assert_relative_eq!(kl, 1.0, max_relative = 1e-15);
    }

    #[test]
    fn kl_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let m = rng.random_range(1..=5);
            let layer = random_layer(KernelFamily::ExponentiatedQuadratic, m, 2, 2, &mut rng);
            let kuu = layer.kuu().unwrap();
            let k = kuu.values() + DMatrix::identity(m, m) * kuu.jitter_applied();
            let kinv = k.clone().try_inverse().unwrap();
            let s = layer.s();
            let mut oracle = 0.0;
            for d in 0..2 {
                let md = layer.mean.column(d);
                oracle += 0.5
                    * ((&kinv * &s).trace() + (md.transpose() * &kinv * md)[(0, 0)] - m as f64 + k.determinant().ln()
                        - s.determinant().ln());
            }
            let kl = kl_gaussian(&layer.mean, &layer.chol_factor(), &kuu).unwrap();
            assert_relative_eq!(kl, oracle, max_relative = 1e-8);
            assert!(kl >= 0.0);
        }
    }
}
