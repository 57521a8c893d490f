//! Chunked map-reduce evaluation over data rows.
//!
//! Chunks are evaluated on a local rayon pool and reduced in ascending chunk
//! order, so a fixed plan gives bit-identical results on every run.

use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::deep::{self, DeepGpModel};
use crate::error::{DeepGpError, Result};
use crate::gradients::{gradient_vector, objective_rows, unpack, Data, Objective, ParameterVector};
use crate::report::BoundReport;

/// Environment variable consulted when no worker count is given explicitly.
pub const WORKERS_ENV: &str = "DEEPGP_WORKERS";

/// Contiguous row ranges partitioning `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    n: usize,
    ranges: Vec<Range<usize>>,
}

impl ChunkPlan {
    /// `chunk_count` ranges whose sizes differ by at most one.
    pub fn even(n: usize, chunk_count: usize) -> Result<Self> {
        if chunk_count == 0 {
            return Err(DeepGpError::InvalidPlan("chunk count must be at least 1".into()));
        }
        if chunk_count > n {
            return Err(DeepGpError::InvalidPlan(format!("{chunk_count} chunks for {n} rows")));
        }
        let base = n / chunk_count;
        let extra = n % chunk_count;
        let mut ranges = Vec::with_capacity(chunk_count);
        let mut start = 0;
        for c in 0..chunk_count {
            let len = base + usize::from(c < extra);
            ranges.push(start..start + len);
            start += len;
        }
        Ok(Self { n, ranges })
    }

    pub fn from_ranges(n: usize, ranges: Vec<Range<usize>>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(DeepGpError::InvalidPlan("no chunks".into()));
        }
        let mut next = 0;
        for r in &ranges {
            if r.start != next || r.end <= r.start {
                return Err(DeepGpError::InvalidPlan(format!(
                    "range {r:?} does not continue the partition at {next}"
                )));
            }
            next = r.end;
        }
        if next != n {
            return Err(DeepGpError::InvalidPlan(format!("ranges cover {next} of {n} rows")));
        }
        Ok(Self { n, ranges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn chunk_count(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }
}

/// Worker count: explicit value, then `DEEPGP_WORKERS`, then available cores.
pub fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit
        .filter(|&w| w > 0)
        .or_else(|| {
            std::env::var(WORKERS_ENV)
                .ok()
                .and_then(|v| v.trim().parse::<usize>().ok())
                .filter(|&w| w > 0)
        })
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// A fixed-size worker pool for chunked evaluation.
pub struct Executor {
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers()).finish()
    }
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| DeepGpError::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Chunked [`crate::gradients::evaluate`]; the plan partitions the rows the objective reads.
    pub fn bound(
        &self,
        objective: &Objective,
        model: &DeepGpModel,
        data: Data<'_>,
        plan: &ChunkPlan,
    ) -> Result<BoundReport> {
        let (inputs, y, scale) = objective_rows(objective, model, data)?;
        check_plan(plan, y.nrows())?;
        let caches = model.caches()?;
        let parts: Vec<deep::DataTerms> = self.pool.install(|| {
            plan.ranges
                .par_iter()
                .map(|r| {
                    let (xi, yi) = slice(&inputs, &y, r);
                    deep::evaluate_rows(model, &caches, &xi, &yi)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut iter = parts.into_iter();
        let mut terms = iter.next().expect("plan has a chunk");
        for t in iter {
            terms.merge(&t);
        }
        Ok(deep::assemble_report(&caches, &terms, scale))
    }

    /// Chunked [`crate::gradients::value_and_grad`].
    pub fn value_and_grad(
        &self,
        objective: &Objective,
        params: &ParameterVector,
        data: Data<'_>,
        plan: &ChunkPlan,
    ) -> Result<(f64, ParameterVector)> {
        let model = unpack(params)?;
        let (inputs, y, scale) = objective_rows(objective, &model, data)?;
        check_plan(plan, y.nrows())?;
        let caches = model.caches()?;
        let parts = self.pool.install(|| {
            plan.ranges
                .par_iter()
                .map(|r| {
                    let (xi, yi) = slice(&inputs, &y, r);
                    deep::gradient_rows(&model, &caches, &xi, &yi, scale)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut iter = parts.into_iter();
        let (mut terms, mut raws) = iter.next().expect("plan has a chunk");
        for (t, r) in iter {
            terms.merge(&t);
            for (acc, part) in raws.iter_mut().zip(&r) {
                acc.add(part);
            }
        }
        let grads = deep::finalize_all(&model, &caches, &raws)?;
        let value = match objective {
            Objective::Svi => crate::gradients::evaluate(objective, &model, data)?.total,
            _ => deep::assemble_report(&caches, &terms, scale).total,
        };
        Ok((value, gradient_vector(params, &model, &grads)))
    }
}

fn check_plan(plan: &ChunkPlan, rows: usize) -> Result<()> {
    if plan.n != rows {
        return Err(DeepGpError::InvalidPlan(format!(
            "plan covers {} rows, objective reads {rows}",
            plan.n
        )));
    }
    Ok(())
}

fn slice(inputs: &DMatrix<f64>, y: &DMatrix<f64>, r: &Range<usize>) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        inputs.rows(r.start, r.len()).into_owned(),
        y.rows(r.start, r.len()).into_owned(),
    )
}

/// [`deep::deep_bound`] evaluated chunk by chunk on a pool of `resolve_workers(None)` threads.
pub fn map_reduce_bound(model: &DeepGpModel, data: Data<'_>, plan: &ChunkPlan) -> Result<BoundReport> {
    Executor::new(resolve_workers(None))?.bound(&Objective::Deep, model, data, plan)
}

/// Gradient of [`deep::deep_bound`] evaluated chunk by chunk.
pub fn map_reduce_grad(params: &ParameterVector, data: Data<'_>, plan: &ChunkPlan) -> Result<(f64, ParameterVector)> {
    Executor::new(resolve_workers(None))?.value_and_grad(&Objective::Deep, params, data, plan)
}
