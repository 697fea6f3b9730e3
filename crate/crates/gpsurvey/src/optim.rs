//! Gradient-ascent plumbing shared by the GP fitting routines.

/// How hyperparameter gradients of the variational bounds are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperGradMode {
    /// Closed-form adjoint accumulation (fast path).
    Analytic,
    /// Central finite differences in log-space (reference path).
    CentralDiff,
}

#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    /// Iteration cap for offline fits (exact GP, SGPR).
    pub max_iters: usize,
    /// Gradient-norm tolerance declaring a stationary point.
    pub grad_tol: f64,
    /// Ascent steps per streaming update.
    pub streaming_steps: usize,
    /// Base step size for the streaming optimizer.
    pub streaming_step_size: f64,
    /// Streaming hyperparameter steps are interleaved every
    /// `ceil(m / hyper_stride_points)` iterations so the theta-dependent
    /// factorizations amortize against the cheap variational steps.
    pub hyper_stride_points: usize,
    /// Minibatch size for stochastic bound evaluations.
    pub minibatch: usize,
    /// Maximum step halvings in a backtracking line search.
    pub backtracks: usize,
    pub hyper_grad: HyperGradMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-5,
            streaming_steps: 50,
            streaming_step_size: 1e-2,
            hyper_stride_points: 64,
            minibatch: 64,
            backtracks: 12,
            hyper_grad: HyperGradMode::Analytic,
        }
    }
}

/// What happened during a fit. Optimizer trouble is reported here, never as
/// an error: callers always get the best iterate found.
#[derive(Clone, Copy, Debug)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    /// Set when every line search along the way failed to improve the
    /// objective and the fit stopped early on the best iterate.
    pub line_search_failed: bool,
    pub initial_objective: f64,
    pub final_objective: f64,
}

pub(crate) struct AscentResult {
    pub x: Vec<f64>,
    pub report: FitReport,
}

/// Full-batch gradient ascent with a backtracking line search. `objective`
/// must return `f64::NEG_INFINITY` (not panic) on numerically infeasible
/// points so the line search can retreat.
pub(crate) fn gradient_ascent(
    objective: &dyn Fn(&[f64]) -> f64,
    gradient: &dyn Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    cfg: &OptimizerConfig,
) -> AscentResult {
    let mut x = x0.to_vec();
    let mut value = objective(&x);
    let initial = value;
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut line_search_failed = false;

    for _ in 0..cfg.max_iters {
        let g = gradient(&x);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            line_search_failed = true;
            break;
        }
        if norm < cfg.grad_tol {
            converged = true;
            break;
        }

        let mut accepted = false;
        let mut s = step;
        for _ in 0..=cfg.backtracks {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + s * gi).collect();
            let tv = objective(&trial);
            if tv.is_finite() && tv > value {
                x = trial;
                value = tv;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        iterations += 1;
        if accepted {
            // Grow the trust in the step slowly; shrink hard on failure.
            step = (s * 2.0).min(1.0);
        } else {
            line_search_failed = true;
            break;
        }
    }

    AscentResult {
        x,
        report: FitReport {
            iterations,
            converged,
            line_search_failed,
            initial_objective: initial,
            final_objective: value,
        },
    }
}

/// Central finite differences of `objective` around `x`.
pub(crate) fn central_difference(
    objective: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = objective(&probe);
        probe[i] = x[i] - step;
        let lo = objective(&probe);
        probe[i] = x[i];
        g[i] = (hi - lo) / (2.0 * step);
    }
    g
}
