//! Maximization of the bound by L-BFGS or adaptive stochastic gradients.

pub mod init;
pub mod lbfgs;

use std::time::Instant;

use log::{debug, info};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deep::DeepGpModel;
use crate::error::{DeepGpError, Result};
use crate::gradients::{evaluate, pack, unpack, Data, Objective, ParamRole, ParameterVector};
use crate::parallel::{resolve_workers, ChunkPlan, Executor};

pub use init::{initialize, kmeans_pp, Architecture, LayerSpec};
pub use lbfgs::LbfgsOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Lbfgs,
    SgdAdaptive,
}

impl std::str::FromStr for Method {
    type Err = DeepGpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(Method::Lbfgs),
            "sgd-adaptive" | "sgd" => Ok(Method::SgdAdaptive),
            other => Err(DeepGpError::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Default number of data chunks per evaluation. Fixed rather than tied to
/// the worker count so results do not depend on the machine.
pub const DEFAULT_CHUNKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    pub max_iters: usize,
    pub history_size: usize,
    /// Adaptive SGD learning rate.
    pub step_size: f64,
    /// Decay of the running squared-gradient average.
    pub decay: f64,
    /// Minibatch size for SGD; `None` uses every row.
    pub batch_size: Option<usize>,
    /// Stop when the largest free gradient entry falls below this.
    pub grad_tolerance: f64,
    /// Stop when an accepted step changes the objective by less than this, relative.
    pub objective_tolerance: f64,
    pub seed: u64,
    pub workers: Option<usize>,
    pub chunks: Option<usize>,
    pub tie_lengthscales: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Lbfgs,
            max_iters: 1000,
            history_size: 10,
            step_size: 0.01,
            decay: 0.999,
            batch_size: None,
            grad_tolerance: 1e-5,
            objective_tolerance: 1e-9,
            seed: 0,
            workers: None,
            chunks: None,
            tie_lengthscales: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: String| Err(DeepGpError::Config(msg));
        if self.history_size == 0 {
            return bad("history_size must be positive".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return bad(format!("decay must lie in [0, 1), got {}", self.decay));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > n {
                return bad(format!("batch_size {b} must lie in 1..={n}"));
            }
        }
        if !(self.grad_tolerance >= 0.0) || !(self.objective_tolerance >= 0.0) {
            return bad("tolerances must be non-negative".into());
        }
        if self.chunks == Some(0) || self.workers == Some(0) {
            return bad("chunks and workers must be positive".into());
        }
        Ok(())
    }

    fn plan(&self, rows: usize) -> Result<ChunkPlan> {
        ChunkPlan::even(rows, self.chunks.unwrap_or(DEFAULT_CHUNKS).min(rows))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub seconds: f64,
    pub batch_id: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    GradTolerance,
    ObjectiveTolerance,
    MaxIters,
    /// No acceptable step was found; the best point so far is returned.
    LineSearchFailure,
    /// The objective stopped being finite; the last finite state is returned.
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: DeepGpModel,
    pub params: ParameterVector,
    pub trace: Vec<TraceRecord>,
    pub reason: StopReason,
    /// Full-data bound at the returned parameters.
    pub final_bound: f64,
}

/// Trains every parameter of `model`.
pub fn maximize(model: &DeepGpModel, data: Data<'_>, config: &OptimizerConfig) -> Result<TrainResult> {
    maximize_params(pack(model), data, config)
}

/// Trains the free entries of `params`; entries in its `fixed_mask` stay put.
pub fn maximize_params(params: ParameterVector, data: Data<'_>, config: &OptimizerConfig) -> Result<TrainResult> {
    let n = data.y.nrows();
    config.validate(n)?;
    let exec = Executor::new(resolve_workers(config.workers))?;
    let ties = tie_groups(&params, config.tie_lengthscales);
    let start = Instant::now();
    let (params, trace, reason) = match config.method {
        Method::Lbfgs => run_lbfgs(params, data, config, &exec, &ties, start)?,
        Method::SgdAdaptive => run_sgd(params, data, config, &exec, &ties, start)?,
    };
    let model = unpack(&params)?;
    let final_bound = evaluate(&Objective::Deep, &model, data)?.total;
    info!(
        "stopped after {} iterations ({:?}), bound {final_bound:.6}",
        trace.last().map_or(0, |t| t.iteration),
        reason
    );
    Ok(TrainResult {
        model,
        params,
        trace,
        reason,
        final_bound,
    })
}

/// Lengthscale segments that move together when tying is on.
fn tie_groups(params: &ParameterVector, tie: bool) -> Vec<std::ops::Range<usize>> {
    if !tie {
        return Vec::new();
    }
    params
        .layout
        .segments
        .iter()
        .filter(|s| s.role == ParamRole::LengthscalesLog && s.len > 1)
        .map(|s| s.offset..s.offset + s.len)
        .collect()
}

/// Replaces each tied group's gradient by its mean, which keeps equal entries equal.
fn project(grad: &mut DVector<f64>, ties: &[std::ops::Range<usize>]) {
    for r in ties {
        let mean = grad.rows(r.start, r.len()).mean();
        grad.rows_mut(r.start, r.len()).fill(mean);
    }
}

fn run_lbfgs(
    params: ParameterVector,
    data: Data<'_>,
    config: &OptimizerConfig,
    exec: &Executor,
    ties: &[std::ops::Range<usize>],
    start: Instant,
) -> Result<(ParameterVector, Vec<TraceRecord>, StopReason)> {
    let plan = config.plan(data.y.nrows())?;
    let template = params.clone();
    let f = |x: &DVector<f64>| {
        let pv = template.with_values(x.clone()).ok()?;
        match exec.value_and_grad(&Objective::Deep, &pv, data, &plan) {
            Ok((v, mut g)) => {
                project(&mut g.values, ties);
                Some((v, g.values))
            }
            Err(e) => {
                debug!("evaluation failed: {e}");
                None
            }
        }
    };
    let opts = LbfgsOptions {
        max_iters: config.max_iters,
        history_size: config.history_size,
        grad_tolerance: config.grad_tolerance,
        objective_tolerance: config.objective_tolerance,
    };
    let mut trace = Vec::new();
    let record = |iteration: usize, objective: f64, grad: &DVector<f64>| {
        trace.push(TraceRecord {
            iteration,
            objective,
            grad_norm: lbfgs::free_norm(grad, &template.fixed_mask),
            seconds: start.elapsed().as_secs_f64(),
            batch_id: None,
        });
    };
    let outcome = lbfgs::maximize(f, params.values.clone(), &params.fixed_mask, opts, record)
        .ok_or(DeepGpError::NonFiniteObjective { iteration: 0 })?;
    Ok((params.with_values(outcome.x)?, trace, outcome.reason))
}

const ADAM_MOMENTUM: f64 = 0.9;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive per-coordinate ascent on seeded, shuffled minibatches.
fn run_sgd(
    params: ParameterVector,
    data: Data<'_>,
    config: &OptimizerConfig,
    exec: &Executor,
    ties: &[std::ops::Range<usize>],
    start: Instant,
) -> Result<(ParameterVector, Vec<TraceRecord>, StopReason)> {
    let n = data.y.nrows();
    let b = config.batch_size.unwrap_or(n);
    let plan = config.plan(b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batches_per_epoch = n / b;
    let mut current = params;
    let mut last_good: Option<ParameterVector> = None;
    let dim = current.len();
    let mut first = DVector::zeros(dim);
    let mut second = DVector::zeros(dim);
    let mut trace = Vec::new();
    let mut reason = StopReason::MaxIters;
    for t in 0..config.max_iters {
        let slot = t % batches_per_epoch;
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        let mut batch = order[slot * b..(slot + 1) * b].to_vec();
        batch.sort_unstable();
        let objective = Objective::Minibatch { batch, n_total: n };
        let (value, grad) = match exec.value_and_grad(&objective, &current, data, &plan) {
            Ok((v, g)) if v.is_finite() && g.values.iter().all(|e| e.is_finite()) => (v, g),
            Ok(_)
            | Err(DeepGpError::NotPositiveDefinite { .. })
            | Err(DeepGpError::NonPositiveHyperparameter { .. }) => {
                let Some(good) = last_good.take() else {
                    return Err(DeepGpError::NonFiniteObjective { iteration: t });
                };
                current = good;
                reason = StopReason::NonFinite;
                break;
            }
            Err(e) => return Err(e),
        };
        let mut g = grad.values;
        project(&mut g, ties);
        trace.push(TraceRecord {
            iteration: t,
            objective: value,
            grad_norm: lbfgs::free_norm(&g, &current.fixed_mask),
            seconds: start.elapsed().as_secs_f64(),
            batch_id: Some(slot),
        });
        first = first * ADAM_MOMENTUM + &g * (1.0 - ADAM_MOMENTUM);
        second = second * config.decay + g.component_mul(&g) * (1.0 - config.decay);
        let k = (t + 1) as i32;
        let c1 = 1.0 - ADAM_MOMENTUM.powi(k);
        let c2 = 1.0 - config.decay.powi(k);
        let mut next = current.values.clone();
        for i in 0..dim {
            if !current.fixed_mask[i] {
                next[i] += config.step_size * (first[i] / c1) / ((second[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            reason = StopReason::NonFinite;
            break;
        }
        let updated = current.with_values(next)?;
        last_good = Some(std::mem::replace(&mut current, updated));
    }
    Ok((current, trace, reason))
}
