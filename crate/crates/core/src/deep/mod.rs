//! Deep GP stacks: Gaussian message propagation and the nested bound.
//!
//! Layer `i` maps `Q_{i-1}` input columns to `Q_i` output columns. The first
//! layer sees the data inputs as a zero-variance message. Every later layer
//! sees the moment-matched diagonal message produced by the one before it.
//!
//! The data-dependent part of the bound is a sum over data points, so the
//! same row-level functions serve the full bound, minibatches and the chunked
//! parallel evaluation.

mod layer;

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DeepGpError, Result};
use crate::psi::GaussianMessage;
use crate::report::BoundReport;
use crate::sparse::VariationalLayer;

pub(crate) use layer::{
    finalize, layer_backward, layer_forward, LayerCache, LayerForward, LayerRole, PenaltyWeights, RawLayerGrad,
};
pub use layer::{LayerGradient, VARIANCE_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Regression,
    /// The targets double as inputs.
    Autoencoder,
}

impl std::str::FromStr for Mode {
    type Err = DeepGpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" => Ok(Mode::Regression),
            "autoencoder" => Ok(Mode::Autoencoder),
            other => Err(DeepGpError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepGpModel {
    pub layers: Vec<VariationalLayer>,
    pub mode: Mode,
}

impl DeepGpModel {
    pub fn new(layers: Vec<VariationalLayer>, mode: Mode) -> Result<Self> {
        let model = Self { layers, mode };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DeepGpError::InvalidModel("a model needs at least one layer".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(DeepGpError::dims(
                    "layer chain",
                    pair[0].output_dim(),
                    pair[1].input_dim(),
                ));
            }
        }
        if self.mode == Mode::Autoencoder && self.input_dim() != self.output_dim() {
            return Err(DeepGpError::dims(
                "autoencoder output columns",
                self.input_dim(),
                self.output_dim(),
            ));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// The matrix fed to the first layer: `x` in regression mode, `y` otherwise.
    pub fn inputs<'a>(&self, x: Option<&'a DMatrix<f64>>, y: &'a DMatrix<f64>) -> Result<&'a DMatrix<f64>> {
        let input = match self.mode {
            Mode::Regression => {
                x.ok_or_else(|| DeepGpError::InvalidModel("regression mode requires input data".into()))?
            }
            Mode::Autoencoder => y,
        };
        if input.nrows() != y.nrows() {
            return Err(DeepGpError::dims("input rows", y.nrows(), input.nrows()));
        }
        if input.ncols() != self.input_dim() {
            return Err(DeepGpError::dims("input columns", self.input_dim(), input.ncols()));
        }
        if y.ncols() != self.output_dim() {
            return Err(DeepGpError::dims("target columns", self.output_dim(), y.ncols()));
        }
        Ok(input)
    }

    pub(crate) fn caches(&self) -> Result<Vec<LayerCache>> {
        self.validate()?;
        self.layers.iter().map(LayerCache::new).collect()
    }

    fn role(&self, index: usize) -> LayerRole {
        LayerRole {
            propagation: index > 0,
            output: index + 1 == self.depth(),
        }
    }
}

/// Moment-matched output message of one layer.
pub fn propagate_message(layer: &VariationalLayer, q_in: &GaussianMessage) -> Result<GaussianMessage> {
    layer.validate()?;
    if q_in.dim() != layer.input_dim() {
        return Err(DeepGpError::dims("message columns", layer.input_dim(), q_in.dim()));
    }
    let cache = LayerCache::new(layer)?;
    let role = LayerRole {
        propagation: false,
        output: false,
    };
    Ok(layer_forward(layer, &cache, q_in.clone(), role)?.output)
}

/// Compression and propagation penalties a layer would add to the bound when fed `q_in`.
pub fn message_penalties(layer: &VariationalLayer, q_in: &GaussianMessage) -> Result<(f64, f64)> {
    layer.validate()?;
    if q_in.dim() != layer.input_dim() {
        return Err(DeepGpError::dims("message columns", layer.input_dim(), q_in.dim()));
    }
    let cache = LayerCache::new(layer)?;
    let role = LayerRole {
        propagation: true,
        output: false,
    };
    let fwd = layer_forward(layer, &cache, q_in.clone(), role)?;
    Ok((fwd.compression.iter().sum(), fwd.propagation.iter().sum()))
}

/// Unscaled data-dependent terms for a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DataTerms {
    pub fit: f64,
    pub trace: f64,
    pub compression: Vec<f64>,
    pub propagation: Vec<f64>,
    pub per_datum: Vec<f64>,
    pub clamp_events: usize,
}

impl DataTerms {
    pub fn merge(&mut self, other: &DataTerms) {
        self.fit += other.fit;
        self.trace += other.trace;
        for (a, b) in self.compression.iter_mut().zip(&other.compression) {
            *a += b;
        }
        for (a, b) in self.propagation.iter_mut().zip(&other.propagation) {
            *a += b;
        }
        self.per_datum.extend_from_slice(&other.per_datum);
        self.clamp_events += other.clamp_events;
    }
}

pub(crate) fn forward_rows(
    model: &DeepGpModel,
    caches: &[LayerCache],
    inputs: &DMatrix<f64>,
) -> Result<Vec<LayerForward>> {
    let mut fwds: Vec<LayerForward> = Vec::with_capacity(model.depth());
    let mut message = GaussianMessage::deterministic(inputs.clone());
    for (i, (layer, cache)) in model.layers.iter().zip(caches).enumerate() {
        let fwd = layer_forward(layer, cache, message, model.role(i))?;
        message = fwd.output.clone();
        fwds.push(fwd);
    }
    Ok(fwds)
}

pub(crate) fn data_terms(model: &DeepGpModel, fwds: &[LayerForward], y: &DMatrix<f64>) -> DataTerms {
    let depth = model.depth();
    let out = &fwds[depth - 1];
    let sigma2 = model.layers[depth - 1].noise_var;
    let n = y.nrows();
    let mut terms = DataTerms {
        fit: 0.0,
        trace: 0.0,
        compression: vec![0.0; depth],
        propagation: vec![0.0; depth - 1],
        per_datum: Vec::with_capacity(n),
        clamp_events: fwds[..depth - 1].iter().map(LayerForward::clamp_count).sum(),
    };
    for i in 0..n {
        let mut fit_i = 0.0;
        for d in 0..y.ncols() {
            let r = y[(i, d)] - out.output.means()[(i, d)];
            fit_i += -0.5 * (2.0 * PI * sigma2).ln() - 0.5 * r * r / sigma2;
        }
        let mut partial = fit_i - out.trace[i];
        terms.fit += fit_i;
        terms.trace += out.trace[i];
        for (l, fwd) in fwds.iter().enumerate() {
            terms.compression[l] += fwd.compression[i];
            partial -= fwd.compression[i];
            if l > 0 {
                terms.propagation[l - 1] += fwd.propagation[i];
                partial -= fwd.propagation[i];
            }
        }
        terms.per_datum.push(partial);
    }
    terms
}

pub(crate) fn evaluate_rows(
    model: &DeepGpModel,
    caches: &[LayerCache],
    inputs: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<DataTerms> {
    let fwds = forward_rows(model, caches, inputs)?;
    Ok(data_terms(model, &fwds, y))
}

/// Data terms plus the summable raw gradient of `scale · data part` for each layer.
pub(crate) fn gradient_rows(
    model: &DeepGpModel,
    caches: &[LayerCache],
    inputs: &DMatrix<f64>,
    y: &DMatrix<f64>,
    scale: f64,
) -> Result<(DataTerms, Vec<RawLayerGrad>)> {
    let depth = model.depth();
    let fwds = forward_rows(model, caches, inputs)?;
    let terms = data_terms(model, &fwds, y);

    let out_layer = &model.layers[depth - 1];
    let sigma2 = out_layer.noise_var;
    let resid = y - fwds[depth - 1].output.means();
    let mut mean_bar = &resid * (scale / sigma2);
    let mut var_bar = DMatrix::zeros(y.nrows(), y.ncols());
    let mut noise_direct = resid
        .iter()
        .map(|r| scale * (-0.5 / sigma2 + 0.5 * r * r / (sigma2 * sigma2)))
        .sum::<f64>();

    let mut raws: Vec<Option<RawLayerGrad>> = vec![None; depth];
    for l in (0..depth).rev() {
        let role = model.role(l);
        let weights = PenaltyWeights {
            compression: -scale,
            propagation: if role.propagation { -scale } else { 0.0 },
            trace: if role.output { -scale } else { 0.0 },
        };
        let (raw, mb, vb) = layer_backward(
            &model.layers[l],
            &caches[l],
            &fwds[l],
            &mean_bar,
            &var_bar,
            weights,
            noise_direct,
        );
        raws[l] = Some(raw);
        mean_bar = mb;
        var_bar = vb;
        noise_direct = 0.0;
    }
    Ok((
        terms,
        raws.into_iter().map(|r| r.expect("every layer visited")).collect(),
    ))
}

pub(crate) fn assemble_report(caches: &[LayerCache], terms: &DataTerms, scale: f64) -> BoundReport {
    let kl_terms: Vec<f64> = caches.iter().map(|c| c.kl).collect();
    let likelihood_fit = scale * terms.fit;
    let likelihood_trace = scale * terms.trace;
    let likelihood_term = likelihood_fit - likelihood_trace;
    let compression_terms: Vec<f64> = terms.compression.iter().map(|v| scale * v).collect();
    let propagation_terms: Vec<f64> = terms.propagation.iter().map(|v| scale * v).collect();
    let total = likelihood_term
        - kl_terms.iter().sum::<f64>()
        - compression_terms.iter().sum::<f64>()
        - propagation_terms.iter().sum::<f64>();
    BoundReport {
        total,
        likelihood_term,
        likelihood_fit,
        likelihood_trace,
        kl_terms,
        compression_terms,
        propagation_terms,
        per_datum_partials: terms.per_datum.iter().map(|v| scale * v).collect(),
        clamp_events: terms.clamp_events,
    }
}

/// Finalizes summed raw gradients into per-layer gradients of the full objective.
pub(crate) fn finalize_all(
    model: &DeepGpModel,
    caches: &[LayerCache],
    raws: &[RawLayerGrad],
) -> Result<Vec<LayerGradient>> {
    model
        .layers
        .iter()
        .zip(caches)
        .zip(raws)
        .map(|((layer, cache), raw)| finalize(layer, cache, raw, -1.0))
        .collect()
}

/// The nested variational compression bound on all rows.
pub fn deep_bound(model: &DeepGpModel, x: Option<&DMatrix<f64>>, y: &DMatrix<f64>) -> Result<BoundReport> {
    let inputs = model.inputs(x, y)?;
    let caches = model.caches()?;
    let terms = evaluate_rows(model, &caches, inputs, y)?;
    Ok(assemble_report(&caches, &terms, 1.0))
}

pub(crate) fn check_batch(batch: &[usize], n: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(DeepGpError::EmptyBatch);
    }
    if let Some(&index) = batch.iter().find(|&&i| i >= n) {
        return Err(DeepGpError::BatchIndexOutOfRange { index, n });
    }
    Ok(())
}

/// Unbiased estimate of [`deep_bound`] from the rows in `batch`; data terms
/// are scaled by `n_total / batch.len()`, KL terms are not.
pub fn deep_bound_minibatch(
    model: &DeepGpModel,
    batch: &[usize],
    x: Option<&DMatrix<f64>>,
    y: &DMatrix<f64>,
    n_total: usize,
) -> Result<BoundReport> {
    let inputs = model.inputs(x, y)?;
    check_batch(batch, y.nrows())?;
    let caches = model.caches()?;
    let terms = evaluate_rows(model, &caches, &inputs.select_rows(batch), &y.select_rows(batch))?;
    Ok(assemble_report(&caches, &terms, n_total as f64 / batch.len() as f64))
}

/// Predictive message over the outputs, including the last layer's noise.
pub fn predict(model: &DeepGpModel, x_star: &DMatrix<f64>) -> Result<GaussianMessage> {
    if model.mode != Mode::Regression {
        return Err(DeepGpError::InvalidModel("predict needs a regression model".into()));
    }
    forward_messages(model, x_star, model.depth())
}

/// Message at hidden layer `layer_index` (1-based) for autoencoder inputs `y`.
pub fn encode(model: &DeepGpModel, y: &DMatrix<f64>, layer_index: usize) -> Result<GaussianMessage> {
    if model.mode != Mode::Autoencoder {
        return Err(DeepGpError::InvalidModel("encode needs an autoencoder model".into()));
    }
    if layer_index == 0 || layer_index > model.depth() {
        return Err(DeepGpError::InvalidLayerIndex {
            index: layer_index,
            depth: model.depth(),
        });
    }
    forward_messages(model, y, layer_index)
}

fn forward_messages(model: &DeepGpModel, inputs: &DMatrix<f64>, upto: usize) -> Result<GaussianMessage> {
    if inputs.ncols() != model.input_dim() {
        return Err(DeepGpError::dims("input columns", model.input_dim(), inputs.ncols()));
    }
    let caches = model.caches()?;
    let mut message = GaussianMessage::deterministic(inputs.clone());
    for (i, (layer, cache)) in model.layers.iter().zip(&caches).take(upto).enumerate() {
        message = layer_forward(layer, cache, message, model.role(i))?.output;
    }
    Ok(message)
}
