//! Per-layer forward and reverse passes shared by every deep objective.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::kernels::gram_gradients;
use crate::linalg::{symmetrize, tri_solve, Side, SpdMatrix};
use crate::psi::{compute_psi, psi_backward, GaussianMessage, PhiAdjoint, PsiAdjoint, PsiStats};
use crate::sparse::{kl_gaussian, VariationalLayer};

/// Smallest message variance passed to the next layer.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Data-independent quantities for one layer.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub kuu: SpdMatrix,
    /// `K⁻¹` (jittered)
    pub kinv: DMatrix<f64>,
    /// `K⁻¹M`
    pub a: DMatrix<f64>,
    pub s: DMatrix<f64>,
    /// `K⁻¹L`, so that `K⁻¹SK⁻¹ = WWᵀ`
    pub w: DMatrix<f64>,
    /// `K⁻¹SK⁻¹`
    pub g: DMatrix<f64>,
    pub kl: f64,
}

impl LayerCache {
    pub fn new(layer: &VariationalLayer) -> Result<Self> {
        let kuu = layer.kuu()?;
        let kinv = kuu.inverse_from_cholesky();
        let a = kuu.solve(&layer.mean);
        let s = layer.s();
        let w = kuu.solve(&layer.chol);
        let g = &w * w.transpose();
        let kl = kl_gaussian(&layer.mean, &layer.chol_factor(), &kuu)?;
        Ok(Self {
            kuu,
            kinv,
            a,
            s,
            w,
            g,
            kl,
        })
    }
}

/// Which penalties a layer contributes to the bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerRole {
    pub propagation: bool,
    pub output: bool,
}

/// Everything the reverse pass needs from one layer's forward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerForward {
    pub input: GaussianMessage,
    pub stats: PsiStats,
    pub output: GaussianMessage,
    /// Row-major `n × D` flags for variances raised to the floor.
    pub clamped: Vec<bool>,
    pub compression: Vec<f64>,
    pub propagation: Vec<f64>,
    pub trace: Vec<f64>,
}

impl LayerForward {
    pub fn clamp_count(&self) -> usize {
        self.clamped.iter().filter(|&&c| c).count()
    }
}

pub(crate) fn layer_forward(
    layer: &VariationalLayer,
    cache: &LayerCache,
    input: GaussianMessage,
    role: LayerRole,
) -> Result<LayerForward> {
    let stats = compute_psi(&layer.kernel, &layer.z, &input)?;
    let n = input.n();
    let d_out = layer.output_dim();
    let dd = d_out as f64;
    let sigma2 = layer.noise_var;
    let phis = stats.phi_per_datum().expect("compute_psi is per datum");
    let means = &stats.psi1 * &cache.a;
    let mut variances = DMatrix::zeros(n, d_out);
    let mut clamped = vec![false; n * d_out];
    let mut compression = Vec::with_capacity(n);
    let mut propagation = Vec::with_capacity(n);
    let mut trace = Vec::with_capacity(n);
    for i in 0..n {
        let phi = &phis[i];
        let psi = stats.psi1.row(i).transpose();
        let psi0 = stats.psi0[i];
        let psi_g_psi = cache.w.tr_mul(&psi).norm_squared();
        let point = (0..input.dim()).all(|q| input.variances()[(i, q)] == 0.0);
        // Φ = ΨΨᵀ for a point input; the factored forms avoid forming K⁻¹
        let (tr_x_phi, tr_g_phi) = if point {
            let half = tri_solve(
                cache.kuu.chol(),
                &DMatrix::from_column_slice(psi.len(), 1, psi.as_slice()),
                Side::Lower,
            )
            .expect("shapes agree");
            (half.norm_squared(), psi_g_psi)
        } else {
            (cache.kinv.dot(phi), cache.g.dot(phi))
        };
        let phi_a = phi * &cache.a;
        let mut spread = 0.0;
        for d in 0..d_out {
            let a_phi_a = cache.a.column(d).dot(&phi_a.column(d));
            let mu = means[(i, d)];
            spread += a_phi_a - mu * mu;
            let v = sigma2 + psi0 - tr_x_phi + tr_g_phi + a_phi_a - mu * mu;
            if v < VARIANCE_FLOOR {
                variances[(i, d)] = VARIANCE_FLOOR;
                clamped[i * d_out + d] = true;
            } else {
                variances[(i, d)] = v;
            }
        }
        compression.push(dd / (2.0 * sigma2) * (psi0 - tr_x_phi));
        propagation.push(if role.propagation {
            (dd * (tr_g_phi - psi_g_psi) + spread) / (2.0 * sigma2)
        } else {
            0.0
        });
        trace.push(if role.output {
            dd / (2.0 * sigma2) * psi_g_psi
        } else {
            0.0
        });
    }
    Ok(LayerForward {
        input,
        stats,
        output: GaussianMessage::from_parts_unchecked(means, variances),
        clamped,
        compression,
        propagation,
        trace,
    })
}

/// Weights with which each penalty enters the objective.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PenaltyWeights {
    pub compression: f64,
    pub propagation: f64,
    pub trace: f64,
}

/// Gradient pieces that are linear in the data and can be summed over chunks.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RawLayerGrad {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub z: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub kinv: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub noise_var: f64,
}

impl RawLayerGrad {
    pub fn zeros(layer: &VariationalLayer) -> Self {
        let m = layer.num_inducing();
        Self {
            variance: 0.0,
            lengthscales: vec![0.0; layer.kernel.lengthscales().len()],
            z: DMatrix::zeros(m, layer.input_dim()),
            a: DMatrix::zeros(m, layer.output_dim()),
            kinv: DMatrix::zeros(m, m),
            g: DMatrix::zeros(m, m),
            noise_var: 0.0,
        }
    }

    pub fn add(&mut self, other: &RawLayerGrad) {
        self.variance += other.variance;
        for (a, b) in self.lengthscales.iter_mut().zip(&other.lengthscales) {
            *a += b;
        }
        self.z += &other.z;
        self.a += &other.a;
        self.kinv += &other.kinv;
        self.g += &other.g;
        self.noise_var += other.noise_var;
    }
}

/// Reverse pass through one layer.
///
/// `mean_bar` and `var_bar` are adjoints of the output message, `noise_direct`
/// any extra derivative with respect to `σ²`. Returns the raw gradient and the
/// adjoints of the input message.
pub(crate) fn layer_backward(
    layer: &VariationalLayer,
    cache: &LayerCache,
    fwd: &LayerForward,
    mean_bar: &DMatrix<f64>,
    var_bar: &DMatrix<f64>,
    weights: PenaltyWeights,
    noise_direct: f64,
) -> (RawLayerGrad, DMatrix<f64>, DMatrix<f64>) {
    let n = fwd.input.n();
    let m = layer.num_inducing();
    let d_out = layer.output_dim();
    let dd = d_out as f64;
    let sigma2 = layer.noise_var;
    let cc = weights.compression * dd / (2.0 * sigma2);
    let pc = weights.propagation / (2.0 * sigma2);
    let tc = weights.trace * dd / (2.0 * sigma2);
    let phis = fwd.stats.phi_per_datum().expect("compute_psi is per datum");
    let means = fwd.output.means();

    let mut raw = RawLayerGrad::zeros(layer);
    let mut psi0_bar = DVector::zeros(n);
    let mut psi1_bar = DMatrix::zeros(n, m);
    let mut phi_bar = Vec::with_capacity(n);
    let mut penalty_sum = 0.0;
    for i in 0..n {
        let phi = &phis[i];
        let psi = fwd.stats.psi1.row(i).transpose();
        let mut vbar = vec![0.0; d_out];
        for (d, v) in vbar.iter_mut().enumerate() {
            if !fwd.clamped[i * d_out + d] {
                *v = var_bar[(i, d)];
            }
        }
        let big_v: f64 = vbar.iter().sum();
        psi0_bar[i] = big_v + cc;

        let mut weighted_a = cache.a.clone();
        let mut mu_eff = DVector::zeros(d_out);
        for d in 0..d_out {
            let w = vbar[d] + pc;
            weighted_a.column_mut(d).scale_mut(w);
            mu_eff[d] = mean_bar[(i, d)] - 2.0 * means[(i, d)] * w;
        }
        let mut pb = &cache.kinv * (-big_v - cc) + &cache.g * (big_v + pc * dd) + &weighted_a * cache.a.transpose();
        symmetrize(&mut pb);

        let g_psi = &cache.g * &psi;
        let p1 = &cache.a * &mu_eff + &g_psi * (2.0 * tc - 2.0 * pc * dd);
        psi1_bar.row_mut(i).copy_from(&p1.transpose());

        raw.a += &psi * mu_eff.transpose() + (phi * &weighted_a) * 2.0;
        raw.kinv += phi * (-big_v - cc);
        raw.g += phi * (big_v + pc * dd) + (&psi * psi.transpose()) * (tc - pc * dd);
        raw.noise_var += big_v;
        penalty_sum += weights.compression * fwd.compression[i]
            + weights.propagation * fwd.propagation[i]
            + weights.trace * fwd.trace[i];
        phi_bar.push(pb);
    }
    raw.noise_var += noise_direct - penalty_sum / sigma2;

    let adjoint = PsiAdjoint {
        psi0: psi0_bar,
        psi1: psi1_bar,
        phi: PhiAdjoint::PerDatum(phi_bar),
    };
    let pg = psi_backward(&layer.kernel, &layer.z, &fwd.input, &fwd.stats, &adjoint);
    raw.variance = pg.variance;
    raw.lengthscales = pg.lengthscales;
    raw.z = pg.z;
    (raw, pg.means, pg.variances)
}

/// Gradient of one layer with respect to its natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub z: DMatrix<f64>,
    pub mean: DMatrix<f64>,
    /// Lower triangular.
    pub chol: DMatrix<f64>,
    pub noise_var: f64,
}

/// Pushes summed raw gradients through `K⁻¹`, `A = K⁻¹M`, `G = K⁻¹SK⁻¹`,
/// adds `kl_weight · ∂KL`, and maps everything onto the layer parameters.
pub(crate) fn finalize(
    layer: &VariationalLayer,
    cache: &LayerCache,
    raw: &RawLayerGrad,
    kl_weight: f64,
) -> Result<LayerGradient> {
    let m = layer.num_inducing();
    let dd = layer.output_dim() as f64;
    let x = &cache.kinv;
    let mean = &layer.mean;

    let mut x_bar = raw.kinv.clone();
    x_bar += &raw.a * mean.transpose();
    let mut mean_bar = x * &raw.a;
    x_bar += &raw.g * x * &cache.s + &cache.s * x * &raw.g;
    let mut s_bar = x * &raw.g * x;

    // KL(q(u) ‖ p(u)) in terms of K⁻¹, S, M and log det K
    x_bar += (&cache.s * (0.5 * dd) + mean * mean.transpose() * 0.5) * kl_weight;
    s_bar += x * (0.5 * dd * kl_weight);
    mean_bar += (x * mean) * kl_weight;
    let mut k_bar = -(x * &x_bar * x) + x * (0.5 * dd * kl_weight);
    symmetrize(&mut k_bar);

    // the jitter is a fixed multiple of the mean diagonal
    let rel = cache.kuu.jitter_scale() / m as f64;
    if rel > 0.0 {
        let tr = k_bar.trace();
        for i in 0..m {
            k_bar[(i, i)] += rel * tr;
        }
    }
    let kg = gram_gradients(&layer.kernel, &layer.z, &layer.z, &k_bar)?;

    let mut chol_bar = (&s_bar + s_bar.transpose()) * &layer.chol;
    chol_bar.fill_upper_triangle(0.0, 1);
    for i in 0..m {
        chol_bar[(i, i)] -= kl_weight * dd / layer.chol[(i, i)];
    }

    Ok(LayerGradient {
        variance: raw.variance + kg.variance,
        lengthscales: raw
            .lengthscales
            .iter()
            .zip(&kg.lengthscales)
            .map(|(a, b)| a + b)
            .collect(),
        z: &raw.z + kg.x + kg.x2,
        mean: mean_bar,
        chol: chol_bar,
        noise_var: raw.noise_var,
    })
}
