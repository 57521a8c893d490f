//! Limited-memory BFGS with a weak Wolfe line search, written for maximization.

use std::collections::VecDeque;

use nalgebra::DVector;

use super::StopReason;

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 40;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub history_size: usize,
    pub grad_tolerance: f64,
    pub objective_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub reason: StopReason,
}

/// Infinity norm over the free coordinates.
pub fn free_norm(g: &DVector<f64>, fixed: &[bool]) -> f64 {
    g.iter()
        .zip(fixed)
        .filter(|(_, &f)| !f)
        .fold(0.0, |acc, (v, _)| acc.max(v.abs()))
}

/// Maximizes `f`, which returns the value and gradient or `None` when the point
/// cannot be evaluated. Coordinates with `fixed[i]` never move. `on_iter` sees
/// every accepted iterate, starting with iteration 0 at `x0`.
///
/// Returns `None` when `f` fails at `x0`.
pub fn maximize<F, C>(
    mut f: F,
    x0: DVector<f64>,
    fixed: &[bool],
    opts: LbfgsOptions,
    mut on_iter: C,
) -> Option<LbfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
    C: FnMut(usize, f64, &DVector<f64>),
{
    let mask = |mut v: DVector<f64>| {
        for (x, &fx) in v.iter_mut().zip(fixed) {
            if fx {
                *x = 0.0;
            }
        }
        v
    };
    // Minimize phi = -f internally.
    let (v0, g0) = eval(&mut f, &x0)?;
    let mut x = x0;
    let mut phi = -v0;
    let mut g = mask(-g0);
    on_iter(0, -phi, &g);

    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iter = 0;
    let reason = loop {
        if free_norm(&g, fixed) <= opts.grad_tolerance {
            break StopReason::GradTolerance;
        }
        if iter >= opts.max_iters {
            break StopReason::MaxIters;
        }
        let mut d = mask(-two_loop(&g, &history));
        let mut slope = d.dot(&g);
        if !(slope < 0.0) {
            history.clear();
            d = -g.clone();
            slope = d.dot(&g);
        }
        let fresh = history.is_empty();
        let initial = if fresh { (1.0 / d.amax()).min(1.0) } else { 1.0 };
        let Some(step) = line_search(&mut f, &x, phi, slope, &d, initial) else {
            break StopReason::LineSearchFailure;
        };
        iter += 1;
        let g_new = mask(-step.grad);
        let s = &step.x - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if history.len() == opts.history_size.max(1) {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let change = (phi - step.phi).abs();
        x = step.x;
        phi = step.phi;
        g = g_new;
        on_iter(iter, -phi, &g);
        if change <= opts.objective_tolerance * phi.abs().max(1.0) {
            // A stalled quasi-Newton step gets one steepest-descent retry.
            if fresh {
                break StopReason::ObjectiveTolerance;
            }
            history.clear();
        }
    };
    Some(LbfgsOutcome {
        x,
        value: -phi,
        grad: -g,
        iterations: iter,
        reason,
    })
}

fn eval<F>(f: &mut F, x: &DVector<f64>) -> Option<(f64, DVector<f64>)>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    f(x).filter(|(v, g)| v.is_finite() && g.iter().all(|e| e.is_finite()))
}

fn two_loop(g: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    q
}

struct Step {
    x: DVector<f64>,
    phi: f64,
    grad: DVector<f64>,
}

/// Bracketing search for a step satisfying the weak Wolfe conditions on `phi`.
/// Falls back to the best sufficient-decrease step if the bracket collapses.
fn line_search<F>(f: &mut F, x: &DVector<f64>, phi0: f64, slope0: f64, d: &DVector<f64>, initial: f64) -> Option<Step>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let mut lo = 0.0;
    let mut phi_lo = phi0;
    let mut slope_lo = slope0;
    let mut hi = f64::INFINITY;
    let mut alpha = initial;
    let mut armijo_best: Option<Step> = None;
    for _ in 0..MAX_LINE_EVALS {
        let trial = x + d * alpha;
        match eval(f, &trial) {
            Some((v, grad)) if -v <= phi0 + C1 * alpha * slope0 && -v <= phi_lo => {
                let phi = -v;
                let slope = -grad.dot(d);
                if slope >= C2 * slope0 {
                    return Some(Step { x: trial, phi, grad });
                }
                lo = alpha;
                phi_lo = phi;
                slope_lo = slope;
                armijo_best = Some(Step { x: trial, phi, grad });
                alpha = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * alpha };
            }
            Some((v, _)) => {
                hi = alpha;
                // Minimizer of the quadratic through (lo, phi_lo, slope_lo) and (hi, -v), kept inside the bracket.
                let width = hi - lo;
                let denom = 2.0 * (-v - phi_lo - slope_lo * width);
                let guess = if denom > 0.0 {
                    lo - slope_lo * width * width / denom
                } else {
                    f64::NAN
                };
                alpha = if guess.is_finite() {
                    guess.clamp(lo + 0.1 * width, lo + 0.9 * width)
                } else {
                    lo + 0.5 * width
                };
            }
            None => {
                hi = alpha;
                alpha = lo + 0.25 * (hi - lo);
            }
        }
        if hi - lo <= 1e-16 * hi.max(1.0) {
            break;
        }
    }
    armijo_best
}
