//! Seeded random instances shared by the unit tests, the integration tests
//! and the acceptance suite.

use nalgebra::DMatrix;
use rand::Rng;

use crate::deep::{DeepGpModel, Mode};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::linalg::LowerTriangular;
use crate::sparse::VariationalLayer;

/// A random layer with inducing inputs in `[-2, 2]^Q`.
///
/// Inducing inputs are kept at least half a lengthscale apart when a few
/// hundred draws can achieve it, which keeps `K_uu` away from the jitter ladder.
pub fn random_layer<R: Rng>(
    family: KernelFamily,
    m: usize,
    q_in: usize,
    q_out: usize,
    rng: &mut R,
) -> VariationalLayer {
    let variance = rng.random_range(0.5..2.0);
    let kernel = match family {
        KernelFamily::ExponentiatedQuadratic => {
            let ls = (0..q_in).map(|_| rng.random_range(0.5..1.5)).collect();
            KernelSpec::exponentiated_quadratic(variance, ls).expect("positive")
        }
        KernelFamily::Linear => KernelSpec::linear(variance, q_in).expect("positive"),
    };
    let z = spread_points(m, q_in, kernel.lengthscales(), rng);
    let mean = DMatrix::from_fn(m, q_out, |_, _| rng.random_range(-1.0..1.0));
    let mut chol = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.3..0.3));
    for i in 0..m {
        chol[(i, i)] = rng.random_range(0.2..0.8);
    }
    VariationalLayer::new(
        kernel,
        z,
        mean,
        LowerTriangular::new(chol).expect("square"),
        rng.random_range(0.05..0.5),
    )
    .expect("valid by construction")
}

fn spread_points<R: Rng>(m: usize, q: usize, ls: &[f64], rng: &mut R) -> DMatrix<f64> {
    let mut z: DMatrix<f64> = DMatrix::zeros(m, q);
    for i in 0..m {
        let mut best = vec![0.0; q];
        let mut best_gap = f64::NEG_INFINITY;
        for _ in 0..200 {
            let cand: Vec<f64> = (0..q).map(|_| rng.random_range(-2.0..2.0)).collect();
            let gap = (0..i)
                .map(|j| {
                    (0..q)
                        .map(|c| ((cand[c] - z[(j, c)]) / ls[c]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if gap > best_gap {
                best_gap = gap;
                best = cand;
            }
            if gap >= 0.5 {
                break;
            }
        }
        for c in 0..q {
            z[(i, c)] = best[c];
        }
    }
    z
}

/// A regression model whose layer `i` maps `dims[i]` to `dims[i + 1]` columns.
pub fn random_model<R: Rng>(dims: &[usize], m: usize, family: KernelFamily, rng: &mut R) -> DeepGpModel {
    let layers = dims
        .windows(2)
        .map(|w| random_layer(family, m, w[0], w[1], rng))
        .collect();
    DeepGpModel::new(layers, Mode::Regression).expect("dimensions chain")
}

/// Inputs uniform on `[-2, 2]`, targets uniform on `[-1, 1]`.
pub fn random_data<R: Rng>(n: usize, q_in: usize, q_out: usize, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_fn(n, q_in, |_, _| rng.random_range(-2.0..2.0)),
        DMatrix::from_fn(n, q_out, |_, _| rng.random_range(-1.0..1.0)),
    )
}

/// Spearman rank correlation, with tied values given their average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}
