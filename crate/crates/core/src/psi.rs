//! Kernel expectations under diagonal Gaussian inputs.
//!
//! For a datum `h ~ N(μ, diag(s))` and inducing inputs `Z`:
//!
//! * `psi0 = E[k(h, h)]`
//! * `psi1[j] = E[k(h, z_j)]`
//! * `phi[j, j'] = E[k(z_j, h) k(h, z_j')]`
//!
//! The exponentiated quadratic forms follow from completing the square in the
//! Gaussian integral. With `a_q = ℓ_q²`:
//!
//! ```text
//! psi1[j]    = α Π_q sqrt(a_q / (a_q + s_q)) exp(-(μ_q - z_jq)² / (2 (a_q + s_q)))
//! phi[j, j'] = α² Π_q sqrt(a_q / (a_q + 2 s_q))
//!              exp(-(z_jq - z_j'q)² / (4 a_q) - (μ_q - z̄_q)² / (a_q + 2 s_q))
//! ```
//!
//! where `z̄ = (z_j + z_j') / 2`. The linear kernel gives
//! `psi1 = α μᵀz_j`, `psi0 = α (‖μ‖² + Σ s)`, `phi = α² Z (μμᵀ + diag s) Zᵀ`.
//!
//! [`monte_carlo_psi`] estimates the same quantities by sampling and exists to
//! certify the closed forms.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DeepGpError, Result};
use crate::kernels::{KernelFamily, KernelSpec};

/// Independent per-datum Gaussian beliefs: row `n` is `N(means[n], diag(variances[n]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMessage {
    means: DMatrix<f64>,
    variances: DMatrix<f64>,
}

impl GaussianMessage {
    pub fn new(means: DMatrix<f64>, variances: DMatrix<f64>) -> Result<Self> {
        if means.nrows() != variances.nrows() {
            return Err(DeepGpError::dims(
                "message variance rows",
                means.nrows(),
                variances.nrows(),
            ));
        }
        if means.ncols() != variances.ncols() {
            return Err(DeepGpError::dims(
                "message variance cols",
                means.ncols(),
                variances.ncols(),
            ));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(DeepGpError::InvalidModel("message means must be finite".into()));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DeepGpError::InvalidModel(
                "message variances must be finite and non-negative".into(),
            ));
        }
        Ok(Self { means, variances })
    }

    /// A point mass at each row of `means`.
    pub fn deterministic(means: DMatrix<f64>) -> Self {
        let variances = DMatrix::zeros(means.nrows(), means.ncols());
        Self { means, variances }
    }

    pub(crate) fn from_parts_unchecked(means: DMatrix<f64>, variances: DMatrix<f64>) -> Self {
        Self { means, variances }
    }

    pub fn n(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn variances(&self) -> &DMatrix<f64> {
        &self.variances
    }

    pub fn is_deterministic(&self) -> bool {
        self.variances.iter().all(|&v| v == 0.0)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            means: self.means.select_rows(rows),
            variances: self.variances.select_rows(rows),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiMode {
    PerDatum,
    Summed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Phi {
    PerDatum(Vec<DMatrix<f64>>),
    Summed(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiStats {
    pub psi0: DVector<f64>,
    pub psi1: DMatrix<f64>,
    pub phi: Phi,
}

impl PsiStats {
    pub fn mode(&self) -> PhiMode {
        match self.phi {
            Phi::PerDatum(_) => PhiMode::PerDatum,
            Phi::Summed(_) => PhiMode::Summed,
        }
    }

    /// Collapses per-datum `Φ_n` into `Σ_n Φ_n`. A no-op when already summed.
    pub fn into_summed(self) -> Self {
        let phi = match self.phi {
            Phi::PerDatum(_) => Phi::Summed(self.phi_sum()),
            summed => summed,
        };
        Self { phi, ..self }
    }

    pub fn phi_sum(&self) -> DMatrix<f64> {
        match &self.phi {
            Phi::Summed(s) => s.clone(),
            Phi::PerDatum(v) => {
                let m = self.psi1.ncols();
                v.iter().fold(DMatrix::zeros(m, m), |acc, p| acc + p)
            }
        }
    }

    /// Per-datum `Φ_n`; `None` in summed mode.
    pub fn phi_per_datum(&self) -> Option<&[DMatrix<f64>]> {
        match &self.phi {
            Phi::PerDatum(v) => Some(v),
            Phi::Summed(_) => None,
        }
    }

    /// The layer-level scalar `ψ = Σ_n psi0[n]`.
    pub fn psi0_total(&self) -> f64 {
        self.psi0.sum()
    }
}

fn check_shapes(k: &KernelSpec, z: &DMatrix<f64>, q: &GaussianMessage) -> Result<()> {
    k.check_cols(z, "inducing input columns")?;
    if q.dim() != k.input_dim() {
        return Err(DeepGpError::dims("message dimension", k.input_dim(), q.dim()));
    }
    if z.nrows() == 0 {
        return Err(DeepGpError::dims("inducing inputs", 1, 0));
    }
    Ok(())
}

/// Closed-form statistics, per-datum `Φ` mode.
pub fn compute_psi(k: &KernelSpec, z: &DMatrix<f64>, q: &GaussianMessage) -> Result<PsiStats> {
    check_shapes(k, z, q)?;
    let n = q.n();
    let m = z.nrows();
    let mut psi0 = DVector::zeros(n);
    let mut psi1 = DMatrix::zeros(n, m);
    let mut phi = Vec::with_capacity(n);
    let zrows: Vec<Vec<f64>> = (0..m).map(|j| z.row(j).iter().copied().collect()).collect();
    let pair = match k.family() {
        KernelFamily::ExponentiatedQuadratic => Some(eq_pair_terms(k, z)),
        KernelFamily::Linear => None,
    };
    for i in 0..n {
        let mu: Vec<f64> = q.means.row(i).iter().copied().collect();
        let s: Vec<f64> = q.variances.row(i).iter().copied().collect();
        let (p0, p1, ph) = if s.iter().all(|&v| v == 0.0) {
            point_row(k, &zrows, &mu)
        } else {
            match k.family() {
                KernelFamily::ExponentiatedQuadratic => eq_row(k, &zrows, pair.as_ref().unwrap(), &mu, &s),
                KernelFamily::Linear => linear_row(k, z, &zrows, &mu, &s),
            }
        };
        psi0[i] = p0;
        psi1.row_mut(i).copy_from(&p1.transpose());
        phi.push(ph);
    }
    Ok(PsiStats {
        psi0,
        psi1,
        phi: Phi::PerDatum(phi),
    })
}

// Deterministic input: expectations collapse to plain kernel evaluations.
fn point_row(k: &KernelSpec, zrows: &[Vec<f64>], mu: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let kvec = DVector::from_iterator(zrows.len(), zrows.iter().map(|zj| k.eval(mu, zj)));
    let p0 = k.eval(mu, mu);
    let phi = &kvec * kvec.transpose();
    (p0, kvec, phi)
}

fn eq_pair_terms(k: &KernelSpec, z: &DMatrix<f64>) -> DMatrix<f64> {
    let m = z.nrows();
    let ls = k.lengthscales();
    DMatrix::from_fn(m, m, |j, jj| {
        let mut acc = 0.0;
        for (qq, l) in ls.iter().enumerate() {
            let d = z[(j, qq)] - z[(jj, qq)];
            acc += d * d / (4.0 * l * l);
        }
        acc
    })
}

fn eq_row(
    k: &KernelSpec,
    zrows: &[Vec<f64>],
    pair: &DMatrix<f64>,
    mu: &[f64],
    s: &[f64],
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let alpha = k.variance();
    let ls = k.lengthscales();
    let m = zrows.len();
    let mut c1 = 1.0;
    let mut c2 = 1.0;
    let mut d1 = Vec::with_capacity(ls.len());
    let mut d2 = Vec::with_capacity(ls.len());
    for (qq, l) in ls.iter().enumerate() {
        let a = l * l;
        d1.push(a + s[qq]);
        d2.push(a + 2.0 * s[qq]);
        c1 *= (a / (a + s[qq])).sqrt();
        c2 *= (a / (a + 2.0 * s[qq])).sqrt();
    }
    let psi1 = DVector::from_iterator(
        m,
        zrows.iter().map(|zj| {
            let mut e = 0.0;
            for qq in 0..ls.len() {
                let t = mu[qq] - zj[qq];
                e += t * t / d1[qq];
            }
            alpha * c1 * (-0.5 * e).exp()
        }),
    );
    let mut phi = DMatrix::zeros(m, m);
    for j in 0..m {
        for jj in 0..=j {
            let mut e = pair[(j, jj)];
            for qq in 0..ls.len() {
                let t = mu[qq] - 0.5 * (zrows[j][qq] + zrows[jj][qq]);
                e += t * t / d2[qq];
            }
            let v = alpha * alpha * c2 * (-e).exp();
            phi[(j, jj)] = v;
            phi[(jj, j)] = v;
        }
    }
    (alpha, psi1, phi)
}

fn linear_row(
    k: &KernelSpec,
    z: &DMatrix<f64>,
    zrows: &[Vec<f64>],
    mu: &[f64],
    s: &[f64],
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let alpha = k.variance();
    let q_dim = mu.len();
    let psi1 = DVector::from_iterator(zrows.len(), zrows.iter().map(|zj| k.eval(mu, zj)));
    let second: f64 = mu.iter().map(|v| v * v).sum::<f64>() + s.iter().sum::<f64>();
    let mut c = DMatrix::from_fn(q_dim, q_dim, |a, b| mu[a] * mu[b]);
    for (qq, sv) in s.iter().enumerate() {
        c[(qq, qq)] += sv;
    }
    let mut phi = (z * c * z.transpose()) * (alpha * alpha);
    crate::linalg::symmetrize(&mut phi);
    (alpha * second, psi1, phi)
}

/// Sampling estimate of the statistics with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct MonteCarloPsi {
    pub stats: PsiStats,
    pub psi0_se: DVector<f64>,
    pub psi1_se: DMatrix<f64>,
    pub phi_se: Vec<DMatrix<f64>>,
}

pub const MIN_MONTE_CARLO_SAMPLES: usize = 1000;

pub fn monte_carlo_psi(
    k: &KernelSpec,
    z: &DMatrix<f64>,
    q: &GaussianMessage,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloPsi> {
    check_shapes(k, z, q)?;
    if samples < MIN_MONTE_CARLO_SAMPLES {
        return Err(DeepGpError::Config(format!(
            "monte carlo psi needs at least {MIN_MONTE_CARLO_SAMPLES} samples, got {samples}"
        )));
    }
    let n = q.n();
    let m = z.nrows();
    let q_dim = q.dim();
    let zrows: Vec<Vec<f64>> = (0..m).map(|j| z.row(j).iter().copied().collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Welford accumulators; a constant stream keeps its mean exact.
    let mut p0 = vec![Welford::default(); n];
    let mut p1 = vec![Welford::default(); n * m];
    let mut ph = vec![Welford::default(); n * m * m];
    let mut h = vec![0.0; q_dim];
    let mut kv = vec![0.0; m];
    for _ in 0..samples {
        for i in 0..n {
            for (qq, hv) in h.iter_mut().enumerate() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *hv = q.means[(i, qq)] + q.variances[(i, qq)].sqrt() * eps;
            }
            p0[i].push(k.eval(&h, &h));
            for j in 0..m {
                kv[j] = k.eval(&h, &zrows[j]);
                p1[i * m + j].push(kv[j]);
            }
            for j in 0..m {
                for jj in 0..m {
                    ph[(i * m + j) * m + jj].push(kv[j] * kv[jj]);
                }
            }
        }
    }
    let psi0 = DVector::from_fn(n, |i, _| p0[i].mean);
    let psi0_se = DVector::from_fn(n, |i, _| p0[i].std_error());
    let psi1 = DMatrix::from_fn(n, m, |i, j| p1[i * m + j].mean);
    let psi1_se = DMatrix::from_fn(n, m, |i, j| p1[i * m + j].std_error());
    let phi = (0..n)
        .map(|i| DMatrix::from_fn(m, m, |j, jj| ph[(i * m + j) * m + jj].mean))
        .collect();
    let phi_se = (0..n)
        .map(|i| DMatrix::from_fn(m, m, |j, jj| ph[(i * m + j) * m + jj].std_error()))
        .collect();
    Ok(MonteCarloPsi {
        stats: PsiStats {
            psi0,
            psi1,
            phi: Phi::PerDatum(phi),
        },
        psi0_se,
        psi1_se,
        phi_se,
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn std_error(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let var = self.m2 / (self.count - 1) as f64;
        (var.max(0.0) / self.count as f64).sqrt()
    }
}

/// Upstream adjoint for `Φ`: one matrix per datum, or one matrix applied to every datum.
#[derive(Debug, Clone)]
pub enum PhiAdjoint {
    PerDatum(Vec<DMatrix<f64>>),
    Shared(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub struct PsiAdjoint {
    pub psi0: DVector<f64>,
    pub psi1: DMatrix<f64>,
    pub phi: PhiAdjoint,
}

impl PsiAdjoint {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            psi0: DVector::zeros(n),
            psi1: DMatrix::zeros(n, m),
            phi: PhiAdjoint::Shared(DMatrix::zeros(m, m)),
        }
    }

    fn phi_for(&self, i: usize) -> &DMatrix<f64> {
        match &self.phi {
            PhiAdjoint::PerDatum(v) => &v[i],
            PhiAdjoint::Shared(s) => s,
        }
    }
}

/// Gradients of `Σ psi0̄·psi0 + Σ psi1̄·psi1 + Σ_n ⟨Φ̄_n, Φ_n⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiGradient {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub z: DMatrix<f64>,
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
}

pub fn psi_gradients(
    k: &KernelSpec,
    z: &DMatrix<f64>,
    q: &GaussianMessage,
    adjoint: &PsiAdjoint,
) -> Result<PsiGradient> {
    check_shapes(k, z, q)?;
    let n = q.n();
    let m = z.nrows();
    if adjoint.psi0.len() != n {
        return Err(DeepGpError::dims("psi0 adjoint length", n, adjoint.psi0.len()));
    }
    if adjoint.psi1.nrows() != n || adjoint.psi1.ncols() != m {
        return Err(DeepGpError::dims("psi1 adjoint rows", n, adjoint.psi1.nrows()));
    }
    match &adjoint.phi {
        PhiAdjoint::PerDatum(v) => {
            if v.len() != n {
                return Err(DeepGpError::dims("phi adjoint count", n, v.len()));
            }
            if v.iter().any(|p| p.nrows() != m || p.ncols() != m) {
                return Err(DeepGpError::dims("phi adjoint size", m, 0));
            }
        }
        PhiAdjoint::Shared(p) => {
            if p.nrows() != m || p.ncols() != m {
                return Err(DeepGpError::dims("phi adjoint size", m, p.nrows()));
            }
        }
    }
    let stats = compute_psi(k, z, q)?;
    Ok(psi_backward(k, z, q, &stats, adjoint))
}

/// Backward pass reusing statistics from [`compute_psi`]; shapes are trusted.
pub(crate) fn psi_backward(
    k: &KernelSpec,
    z: &DMatrix<f64>,
    q: &GaussianMessage,
    stats: &PsiStats,
    adjoint: &PsiAdjoint,
) -> PsiGradient {
    match k.family() {
        KernelFamily::ExponentiatedQuadratic => eq_backward(k, z, q, stats, adjoint),
        KernelFamily::Linear => linear_backward(k, z, q, stats, adjoint),
    }
}

fn eq_backward(
    k: &KernelSpec,
    z: &DMatrix<f64>,
    q: &GaussianMessage,
    stats: &PsiStats,
    adj: &PsiAdjoint,
) -> PsiGradient {
    let n = q.n();
    let m = z.nrows();
    let q_dim = q.dim();
    let alpha = k.variance();
    let ls = k.lengthscales();
    let a: Vec<f64> = ls.iter().map(|l| l * l).collect();
    let phis = stats.phi_per_datum().expect("compute_psi returns per-datum phi");

    let mut d_alpha = adj.psi0.sum();
    let mut d_a = vec![0.0; q_dim];
    let mut d_z = DMatrix::zeros(m, q_dim);
    let mut d_mu = DMatrix::zeros(n, q_dim);
    let mut d_s = DMatrix::zeros(n, q_dim);

    for i in 0..n {
        let d1: Vec<f64> = (0..q_dim).map(|qq| a[qq] + q.variances[(i, qq)]).collect();
        let d2: Vec<f64> = (0..q_dim).map(|qq| a[qq] + 2.0 * q.variances[(i, qq)]).collect();
        for j in 0..m {
            let w = adj.psi1[(i, j)] * stats.psi1[(i, j)];
            if w == 0.0 {
                continue;
            }
            d_alpha += w / alpha;
            for qq in 0..q_dim {
                let t = q.means[(i, qq)] - z[(j, qq)];
                let inv = 1.0 / d1[qq];
                d_mu[(i, qq)] -= w * t * inv;
                d_z[(j, qq)] += w * t * inv;
                let quad = 0.5 * t * t * inv * inv;
                d_s[(i, qq)] += w * (quad - 0.5 * inv);
                d_a[qq] += w * (0.5 / a[qq] - 0.5 * inv + quad);
            }
        }
        let phi_bar = adj.phi_for(i);
        let phi = &phis[i];
        for j in 0..m {
            for jj in 0..m {
                let w = phi_bar[(j, jj)] * phi[(j, jj)];
                if w == 0.0 {
                    continue;
                }
                d_alpha += 2.0 * w / alpha;
                for qq in 0..q_dim {
                    let dz = z[(j, qq)] - z[(jj, qq)];
                    let t = q.means[(i, qq)] - 0.5 * (z[(j, qq)] + z[(jj, qq)]);
                    let inv = 1.0 / d2[qq];
                    d_mu[(i, qq)] -= w * 2.0 * t * inv;
                    d_s[(i, qq)] += w * (2.0 * t * t * inv * inv - inv);
                    d_a[qq] += w * (0.5 / a[qq] - 0.5 * inv + dz * dz / (4.0 * a[qq] * a[qq]) + t * t * inv * inv);
                    d_z[(j, qq)] += w * (t * inv - dz / (2.0 * a[qq]));
                    d_z[(jj, qq)] += w * (t * inv + dz / (2.0 * a[qq]));
                }
            }
        }
    }
    PsiGradient {
        variance: d_alpha,
        lengthscales: (0..q_dim).map(|qq| d_a[qq] * 2.0 * ls[qq]).collect(),
        z: d_z,
        means: d_mu,
        variances: d_s,
    }
}

fn linear_backward(
    k: &KernelSpec,
    z: &DMatrix<f64>,
    q: &GaussianMessage,
    stats: &PsiStats,
    adj: &PsiAdjoint,
) -> PsiGradient {
    let n = q.n();
    let m = z.nrows();
    let q_dim = q.dim();
    let alpha = k.variance();
    let phis = stats.phi_per_datum().expect("compute_psi returns per-datum phi");

    let mut d_alpha = 0.0;
    let mut d_z = DMatrix::zeros(m, q_dim);
    let mut d_mu = DMatrix::zeros(n, q_dim);
    let mut d_s = DMatrix::zeros(n, q_dim);
    for i in 0..n {
        let mu = q.means.row(i).transpose();
        let g0 = adj.psi0[i];
        d_alpha += g0 * stats.psi0[i] / alpha;
        for qq in 0..q_dim {
            d_mu[(i, qq)] += g0 * 2.0 * alpha * mu[qq];
            d_s[(i, qq)] += g0 * alpha;
        }
        for j in 0..m {
            let g = adj.psi1[(i, j)];
            if g == 0.0 {
                continue;
            }
            d_alpha += g * stats.psi1[(i, j)] / alpha;
            for qq in 0..q_dim {
                d_mu[(i, qq)] += g * alpha * z[(j, qq)];
                d_z[(j, qq)] += g * alpha * mu[qq];
            }
        }
        let f = adj.phi_for(i);
        d_alpha += 2.0 * f.component_mul(&phis[i]).sum() / alpha;
        let mut c = &mu * mu.transpose();
        for qq in 0..q_dim {
            c[(qq, qq)] += q.variances[(i, qq)];
        }
        let a2 = alpha * alpha;
        let f_sym = f + f.transpose();
        d_z += (&f_sym * z * &c) * a2;
        let c_bar = (z.transpose() * f * z) * a2;
        let c_sym = &c_bar + c_bar.transpose();
        let dmu_row = &c_sym * &mu;
        for qq in 0..q_dim {
            d_mu[(i, qq)] += dmu_row[qq];
            d_s[(i, qq)] += c_bar[(qq, qq)];
        }
    }
    PsiGradient {
        variance: d_alpha,
        lengthscales: vec![0.0; q_dim],
        z: d_z,
        means: d_mu,
        variances: d_s,
    }
}
