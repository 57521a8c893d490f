//! Seeded model initialization from data.

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deep::{propagate_message, DeepGpModel, Mode};
use crate::error::{DeepGpError, Result};
use crate::gradients::Data;
use crate::kernels::{KernelFamily, KernelSpec};
use crate::linalg::LowerTriangular;
use crate::psi::GaussianMessage;
use crate::sparse::VariationalLayer;

/// Floor on the output-layer kernel variance when the targets are constant.
pub const VARIANCE_FLOOR_INIT: f64 = 1e-6;
pub const HIDDEN_NOISE_INIT: f64 = 1e-2;
/// Initial `L` is this multiple of `sqrt(alpha) I`, so `S = 0.01 alpha I`.
pub const INIT_CHOL_SCALE: f64 = 0.1;

/// One layer of an architecture. `hidden_dim` is the layer's output width; it
/// may be omitted on the last layer, whose width is the target width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    pub kernel: KernelFamily,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    pub mode: Mode,
    /// Share one lengthscale across the input dimensions of each EQ layer.
    #[serde(default)]
    pub tie_lengthscales: bool,
}

impl Architecture {
    /// Output width of every layer.
    pub fn widths(&self, q_out: usize) -> Result<Vec<usize>> {
        if self.layers.is_empty() {
            return Err(DeepGpError::Config("architecture has no layers".into()));
        }
        let last = self.layers.len() - 1;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if l.m == 0 {
                    return Err(DeepGpError::Config(format!("layer {} has m = 0", i + 1)));
                }
                match (i == last, l.hidden_dim) {
                    (true, Some(d)) if d != q_out => Err(DeepGpError::Config(format!(
                        "last layer width {d} differs from the {q_out} target columns"
                    ))),
                    (true, _) => Ok(q_out),
                    (false, Some(d)) if d > 0 => Ok(d),
                    (false, _) => Err(DeepGpError::Config(format!(
                        "layer {} needs a positive hidden_dim",
                        i + 1
                    ))),
                }
            })
            .collect()
    }
}

/// Builds a model layer by layer, feeding each layer's mean outputs to the next.
///
/// Inducing inputs are a k-means++ subset of the layer inputs. Hidden layers
/// start as a projection of their inputs (identity when widths agree, principal
/// directions otherwise); the output layer starts from `M = 0`. Every `q(u)`
/// starts with `S = 0.01 alpha I`.
pub fn initialize(data: Data<'_>, arch: &Architecture, seed: u64) -> Result<DeepGpModel> {
    let y = data.y;
    let n = y.nrows();
    if n == 0 {
        return Err(DeepGpError::EmptyFile);
    }
    let widths = arch.widths(y.ncols())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = match arch.mode {
        Mode::Regression => data
            .x
            .ok_or_else(|| DeepGpError::Config("regression needs inputs".into()))?
            .clone(),
        Mode::Autoencoder => y.clone(),
    };
    if inputs.nrows() != n {
        return Err(DeepGpError::dims("input rows", n, inputs.nrows()));
    }
    let y_var = mean_column_variance(y);
    let last = arch.layers.len() - 1;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (i, (spec, &width)) in arch.layers.iter().zip(&widths).enumerate() {
        if spec.m > n {
            return Err(DeepGpError::Config(format!(
                "layer {} asks for {} inducing points but there are {n} data points",
                i + 1,
                spec.m
            )));
        }
        let z = kmeans_pp(&inputs, spec.m, &mut rng);
        let variance = if i == last { y_var.max(VARIANCE_FLOOR_INIT) } else { 1.0 };
        let kernel = match spec.kernel {
            KernelFamily::ExponentiatedQuadratic => {
                KernelSpec::exponentiated_quadratic(variance, lengthscales(&inputs, i, arch.tie_lengthscales))?
            }
            KernelFamily::Linear => KernelSpec::linear(variance, inputs.ncols())?,
        };
        let mean = if i == last {
            DMatrix::zeros(spec.m, width)
        } else {
            projection(&inputs, &z, width)
        };
        let noise = if i == last {
            (0.1 * y_var).max(VARIANCE_FLOOR_INIT)
        } else {
            HIDDEN_NOISE_INIT
        };
        let chol = LowerTriangular::new(DMatrix::identity(spec.m, spec.m) * (INIT_CHOL_SCALE * variance.sqrt()))?;
        let layer = VariationalLayer::new(kernel, z, mean, chol, noise)?;
        if i < last {
            inputs = propagate_message(&layer, &GaussianMessage::deterministic(inputs))?
                .means()
                .clone();
        }
        layers.push(layer);
    }
    DeepGpModel::new(layers, arch.mode)
}

fn mean_column_variance(y: &DMatrix<f64>) -> f64 {
    (0..y.ncols()).map(|c| column_variance(y, c)).sum::<f64>() / y.ncols().max(1) as f64
}

fn column_variance(x: &DMatrix<f64>, c: usize) -> f64 {
    let col = x.column(c);
    let mean = col.mean();
    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64
}

fn lengthscales(inputs: &DMatrix<f64>, layer: usize, tie: bool) -> Vec<f64> {
    let mut ls: Vec<f64> = (0..inputs.ncols())
        .map(|c| {
            let sd = column_variance(inputs, c).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                warn!(
                    "layer {} input column {} has zero variance; lengthscale set to 1",
                    layer + 1,
                    c + 1
                );
                1.0
            }
        })
        .collect();
    if tie {
        let shared = ls.iter().sum::<f64>() / ls.len() as f64;
        ls.iter_mut().for_each(|l| *l = shared);
    }
    ls
}

/// k-means++ seeding restricted to distinct rows of `x`.
pub fn kmeans_pp<R: Rng>(x: &DMatrix<f64>, m: usize, rng: &mut R) -> DMatrix<f64> {
    let n = x.nrows();
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut dist = vec![f64::INFINITY; n];
    while chosen.len() < m {
        let total: f64 = dist.iter().zip(&taken).filter(|(_, &t)| !t).map(|(d, _)| *d).sum();
        let pick = if chosen.is_empty() || !(total > 0.0) || !total.is_finite() {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for i in (0..n).filter(|&i| !taken[i]) {
                pick = Some(i);
                if target < dist[i] {
                    break;
                }
                target -= dist[i];
            }
            pick.expect("a free row exists")
        };
        taken[pick] = true;
        chosen.push(pick);
        for i in 0..n {
            let d = (x.row(i) - x.row(pick)).norm_squared();
            dist[i] = dist[i].min(d);
        }
    }
    x.select_rows(&chosen)
}

/// Inducing outputs for a hidden layer: `Z` itself when the widths agree,
/// otherwise the centred projection of `Z` on the leading principal directions
/// of the layer inputs, repeated cyclically if the layer widens.
fn projection(inputs: &DMatrix<f64>, z: &DMatrix<f64>, width: usize) -> DMatrix<f64> {
    let q = inputs.ncols();
    if q == width {
        return z.clone();
    }
    let means = inputs.row_mean();
    let centred = DMatrix::from_fn(inputs.nrows(), q, |i, j| inputs[(i, j)] - means[j]);
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let zc = DMatrix::from_fn(z.nrows(), q, |i, j| z[(i, j)] - means[j]);
    let rank = order.len();
    DMatrix::from_fn(z.nrows(), width, |i, c| {
        let dir = v_t.row(order[c % rank]);
        (0..q).map(|j| zc[(i, j)] * dir[j]).sum()
    })
}
