//! Kernel evaluation and the dense linear-algebra primitives shared by all
//! GP backends: RBF covariance blocks, jittered Cholesky factorization, and
//! greedy pivoted-Cholesky subset selection for inducing points.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::Point;

/// Kernel hyperparameters, stored in log-space so positivity is structural.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparameters {
    log_lengthscale: f64,
    log_signal_variance: f64,
    log_noise_variance: f64,
}

impl Hyperparameters {
    pub fn new(lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        for (name, v) in [
            ("lengthscale", lengthscale),
            ("signal_variance", signal_variance),
            ("noise_variance", noise_variance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be finite and strictly positive, got {v}"
                )));
            }
        }
        Ok(Self {
            log_lengthscale: lengthscale.ln(),
            log_signal_variance: signal_variance.ln(),
            log_noise_variance: noise_variance.ln(),
        })
    }

    pub fn from_log(log_lengthscale: f64, log_signal_variance: f64, log_noise_variance: f64) -> Result<Self> {
        for (name, v) in [
            ("log_lengthscale", log_lengthscale),
            ("log_signal_variance", log_signal_variance),
            ("log_noise_variance", log_noise_variance),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(Self { log_lengthscale, log_signal_variance, log_noise_variance })
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    /// Log-space coordinates in optimizer order:
    /// `[log lengthscale, log signal variance, log noise variance]`.
    pub fn log_vector(&self) -> [f64; 3] {
        [self.log_lengthscale, self.log_signal_variance, self.log_noise_variance]
    }

    pub fn from_log_vector(v: [f64; 3]) -> Result<Self> {
        Self::from_log(v[0], v[1], v[2])
    }
}

/// A dense matrix of kernel evaluations. `self_cov` marks K(X,X) blocks,
/// which are symmetric PSD up to jitter.
#[derive(Clone, Debug)]
pub struct CovMatrix {
    matrix: DMatrix<f64>,
    self_cov: bool,
}

impl CovMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn is_self_covariance(&self) -> bool {
        self.self_cov
    }
}

fn check_finite(points: &[Point]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "point {i} has non-finite coordinates ({}, {})",
                p.x, p.y
            )));
        }
    }
    Ok(())
}

/// RBF (squared-exponential) covariance block between two point sets:
/// entry (i,j) = signal_variance * exp(-|a_i - b_j|^2 / (2 lengthscale^2)).
pub fn rbf_kernel(a: &[Point], b: &[Point], hyper: &Hyperparameters) -> Result<CovMatrix> {
    check_finite(a)?;
    check_finite(b)?;
    let self_cov = a.len() == b.len()
        && a.iter().zip(b).all(|(p, q)| p.x == q.x && p.y == q.y);
    Ok(CovMatrix { matrix: rbf_matrix(a, b, hyper), self_cov })
}

/// Unchecked fast path used internally where inputs are known finite.
pub(crate) fn rbf_matrix(a: &[Point], b: &[Point], hyper: &Hyperparameters) -> DMatrix<f64> {
    let sf2 = hyper.signal_variance();
    let inv_2l2 = 0.5 / (hyper.lengthscale() * hyper.lengthscale());
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let dx = a[i].x - b[j].x;
        let dy = a[i].y - b[j].y;
        sf2 * (-(dx * dx + dy * dy) * inv_2l2).exp()
    })
}

/// Pairwise squared distances; the gradient of an RBF block w.r.t. the log
/// lengthscale is K .* D2 / lengthscale^2.
pub(crate) fn sq_dist_matrix(a: &[Point], b: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let dx = a[i].x - b[j].x;
        let dy = a[i].y - b[j].y;
        dx * dx + dy * dy
    })
}

pub(crate) fn rbf_diag(n: usize, hyper: &Hyperparameters) -> DVector<f64> {
    DVector::from_element(n, hyper.signal_variance())
}

/// Jitter escalation for near-singular self-covariances: starting value and
/// cap are relative to the mean diagonal of the matrix being factorized.
#[derive(Clone, Copy, Debug)]
pub struct JitterPolicy {
    pub initial_rel: f64,
    pub max_rel: f64,
    pub growth: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        // Streaming covariances go near-singular as inducing points cluster,
        // so the cap is generous.
        Self { initial_rel: 1e-8, max_rel: 1e-2, growth: 10.0 }
    }
}

/// A successful jittered Cholesky factorization of `M + jitter * I`.
#[derive(Clone, Debug)]
pub struct PsdCholesky {
    factor: Cholesky<f64, Dyn>,
    /// Absolute jitter that was added to the diagonal (0 when none needed).
    pub jitter: f64,
}

impl PsdCholesky {
    /// Lower-triangular factor L with the upper triangle zeroed.
    pub fn lower(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn dim(&self) -> usize {
        self.factor.l_dirty().nrows()
    }

    /// log det(M + jitter I) via the factor diagonal.
    pub fn log_det(&self) -> f64 {
        2.0 * self.factor.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solve (M + jitter I) X = B.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    /// Forward-substitution half-solve: L^-1 B.
    pub fn half_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        assert!(self.factor.l_dirty().solve_lower_triangular_mut(&mut x));
        x
    }

    /// Explicit inverse (M + jitter I)^-1; used on hot read paths where many
    /// right-hand sides amortize the cost.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }
}

/// Cholesky of a symmetric PSD matrix with geometric jitter escalation.
/// The first attempt adds no jitter at all.
pub fn cholesky_psd(m: &DMatrix<f64>, policy: &JitterPolicy) -> Result<PsdCholesky> {
    assert_eq!(m.nrows(), m.ncols(), "cholesky_psd needs a square matrix");
    let n = m.nrows();
    let mean_diag = if n == 0 { 0.0 } else { m.diagonal().sum() / n as f64 };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };

    let mut attempted = Vec::new();
    let mut jitter = 0.0;
    loop {
        attempted.push(jitter);
        let candidate = if jitter == 0.0 {
            m.clone()
        } else {
            let mut c = m.clone();
            for i in 0..n {
                c[(i, i)] += jitter;
            }
            c
        };
        if let Some(factor) = Cholesky::new(candidate) {
            // nalgebra accepts some indefinite inputs by producing NaNs.
            if factor.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
                return Ok(PsdCholesky { factor, jitter });
            }
        }
        jitter = if jitter == 0.0 { policy.initial_rel * scale } else { jitter * policy.growth };
        if jitter > policy.max_rel * scale * (1.0 + 1e-12) {
            return Err(Error::Factorization { attempted_jitter: attempted });
        }
    }
}

/// First `k` pivot indices of a diagonal-pivoted incomplete Cholesky of
/// K(candidates, candidates): greedy maximum residual variance, ties broken
/// by lowest index. Output for `k` is a prefix of the output for `k+1`.
pub fn pivoted_cholesky_select(
    candidates: &[Point],
    k: usize,
    hyper: &Hyperparameters,
) -> Result<Vec<usize>> {
    check_finite(candidates)?;
    let n = candidates.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "pivot count k={k} out of range 1..={n}"
        )));
    }

    let sf2 = hyper.signal_variance();
    let floor = 1e-12 * sf2;
    let mut residual: Vec<f64> = vec![sf2; n];
    let mut taken = vec![false; n];
    // Rows of the incomplete factor restricted to selected pivots.
    let mut factor_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut selected = Vec::with_capacity(k);

    for _ in 0..k {
        let mut best = usize::MAX;
        let mut best_val = f64::NEG_INFINITY;
        for j in 0..n {
            if !taken[j] && residual[j] > best_val {
                best = j;
                best_val = residual[j];
            }
        }
        let pivot = best;
        taken[pivot] = true;
        selected.push(pivot);

        if best_val > floor {
            let inv_sqrt = 1.0 / best_val.sqrt();
            let pivot_point = candidates[pivot];
            let mut col = vec![0.0; n];
            for i in 0..n {
                if taken[i] && i != pivot {
                    continue;
                }
                let dx = candidates[i].x - pivot_point.x;
                let dy = candidates[i].y - pivot_point.y;
                let mut c = sf2
                    * (-(dx * dx + dy * dy)
                        / (2.0 * hyper.lengthscale() * hyper.lengthscale()))
                    .exp();
                for prev in &factor_cols {
                    c -= prev[i] * prev[pivot];
                }
                col[i] = c * inv_sqrt;
            }
            for i in 0..n {
                if !taken[i] {
                    residual[i] -= col[i] * col[i];
                }
            }
            factor_cols.push(col);
        } else {
            // Numerically rank-exhausted: remaining picks fall back to the
            // lowest-index order via the unchanged residual ties.
            factor_cols.push(vec![0.0; n]);
        }
    }
    Ok(selected)
}
