//! Covariance functions and their reverse-mode gradients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DeepGpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `α exp(-Σ_q (x_q - x'_q)² / (2 ℓ_q²))`
    #[serde(alias = "eq", alias = "rbf")]
    ExponentiatedQuadratic,
    /// `α xᵀx'`
    #[serde(alias = "lin")]
    Linear,
}

impl std::str::FromStr for KernelFamily {
    type Err = DeepGpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eq" | "rbf" | "exponentiated_quadratic" => Ok(Self::ExponentiatedQuadratic),
            "linear" | "lin" => Ok(Self::Linear),
            other => Err(DeepGpError::Config(format!("unknown kernel `{other}`"))),
        }
    }
}

/// A covariance function with its hyperparameters.
///
/// `lengthscales` always has one entry per input dimension; the linear kernel
/// carries them but never reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    variance: f64,
    lengthscales: Vec<f64>,
}

/// Gradients of `Σ_ij upstream[i,j] K[i,j]` with respect to everything `K` depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGradient {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub x: DMatrix<f64>,
    pub x2: DMatrix<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        check_positive("variance", variance)?;
        if lengthscales.is_empty() {
            return Err(DeepGpError::dims("kernel lengthscales", 1, 0));
        }
        for &l in &lengthscales {
            check_positive("lengthscale", l)?;
        }
        Ok(Self {
            family,
            variance,
            lengthscales,
        })
    }

    pub fn exponentiated_quadratic(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        Self::new(KernelFamily::ExponentiatedQuadratic, variance, lengthscales)
    }

    pub fn linear(variance: f64, input_dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Linear, variance, vec![1.0; input_dim])
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn set_variance(&mut self, variance: f64) -> Result<()> {
        check_positive("variance", variance)?;
        self.variance = variance;
        Ok(())
    }

    pub fn set_lengthscales(&mut self, lengthscales: Vec<f64>) -> Result<()> {
        if lengthscales.len() != self.lengthscales.len() {
            return Err(DeepGpError::dims(
                "kernel lengthscales",
                self.lengthscales.len(),
                lengthscales.len(),
            ));
        }
        for &l in &lengthscales {
            check_positive("lengthscale", l)?;
        }
        self.lengthscales = lengthscales;
        Ok(())
    }

    pub(crate) fn check_cols(&self, x: &DMatrix<f64>, context: &'static str) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(DeepGpError::dims(context, self.input_dim(), x.ncols()));
        }
        Ok(())
    }

    /// Kernel value for two points given as slices.
    pub(crate) fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::ExponentiatedQuadratic => {
                let mut r2 = 0.0;
                for q in 0..a.len() {
                    let l = self.lengthscales[q];
                    let d = a[q] - b[q];
                    r2 += d * d / (l * l);
                }
                self.variance * (-0.5 * r2).exp()
            }
            KernelFamily::Linear => self.variance * a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>(),
        }
    }
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(DeepGpError::NonPositiveHyperparameter { name, value })
    }
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

pub fn gram(k: &KernelSpec, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    k.check_cols(x, "gram X columns")?;
    k.check_cols(x2, "gram X2 columns")?;
    let rows: Vec<Vec<f64>> = (0..x.nrows()).map(|i| row(x, i)).collect();
    let cols: Vec<Vec<f64>> = (0..x2.nrows()).map(|j| row(x2, j)).collect();
    Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
        k.eval(&rows[i], &cols[j])
    }))
}

pub fn gram_diag(k: &KernelSpec, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    k.check_cols(x, "gram_diag X columns")?;
    Ok((0..x.nrows())
        .map(|i| {
            let r = row(x, i);
            k.eval(&r, &r)
        })
        .collect())
}

pub fn gram_gradients(
    k: &KernelSpec,
    x: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
) -> Result<KernelGradient> {
    k.check_cols(x, "gram_gradients X columns")?;
    k.check_cols(x2, "gram_gradients X2 columns")?;
    if upstream.nrows() != x.nrows() {
        return Err(DeepGpError::dims(
            "gram_gradients upstream rows",
            x.nrows(),
            upstream.nrows(),
        ));
    }
    if upstream.ncols() != x2.nrows() {
        return Err(DeepGpError::dims(
            "gram_gradients upstream cols",
            x2.nrows(),
            upstream.ncols(),
        ));
    }
    let q_dim = k.input_dim();
    let mut grad = KernelGradient {
        variance: 0.0,
        lengthscales: vec![0.0; q_dim],
        x: DMatrix::zeros(x.nrows(), q_dim),
        x2: DMatrix::zeros(x2.nrows(), q_dim),
    };
    let alpha = k.variance;
    for i in 0..x.nrows() {
        for j in 0..x2.nrows() {
            let u = upstream[(i, j)];
            if u == 0.0 {
                continue;
            }
            match k.family {
                KernelFamily::ExponentiatedQuadratic => {
                    let mut r2 = 0.0;
                    for q in 0..q_dim {
                        let d = (x[(i, q)] - x2[(j, q)]) / k.lengthscales[q];
                        r2 += d * d;
                    }
                    let kv = alpha * (-0.5 * r2).exp();
                    let w = u * kv;
                    grad.variance += w / alpha;
                    for q in 0..q_dim {
                        let l2 = k.lengthscales[q] * k.lengthscales[q];
                        let diff = x[(i, q)] - x2[(j, q)];
                        grad.x[(i, q)] -= w * diff / l2;
                        grad.x2[(j, q)] += w * diff / l2;
                        grad.lengthscales[q] += w * diff * diff / (l2 * k.lengthscales[q]);
                    }
                }
                KernelFamily::Linear => {
                    let mut dot = 0.0;
                    for q in 0..q_dim {
                        dot += x[(i, q)] * x2[(j, q)];
                        grad.x[(i, q)] += u * alpha * x2[(j, q)];
                        grad.x2[(j, q)] += u * alpha * x[(i, q)];
                    }
                    grad.variance += u * dot;
                }
            }
        }
    }
    Ok(grad)
}
