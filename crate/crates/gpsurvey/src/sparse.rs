//! Sparse GP regression: the collapsed SGPR evidence bound for offline
//! fits, the uncollapsed minibatch (SVGP) bound, and the q(u)-marginalized
//! predictive equations whose per-query cost is independent of the
//! training-set size.

use nalgebra::{DMatrix, DVector};

use crate::data::{DataBatch, PosteriorPrediction};
use crate::elbo::{BoundWorkspace, VariationalParams};
use crate::error::{Error, Result};
use crate::kernel::{
    cholesky_psd, pivoted_cholesky_select, rbf_matrix, Hyperparameters, JitterPolicy,
    PsdCholesky,
};
use crate::optim::{central_difference, gradient_ascent, FitReport, OptimizerConfig};
use crate::Point;

const LN_2PI: f64 = 1.8378770664093453;

/// Inducing inputs Z.
#[derive(Clone, Debug)]
pub struct InducingSet {
    points: Vec<Point>,
}

impl InducingSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("inducing set must be nonempty".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }
}

/// Variational distribution q(u) in moment form.
#[derive(Clone, Debug)]
pub struct VariationalState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl VariationalState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if cov.nrows() != m || cov.ncols() != m {
            return Err(Error::InvalidInput(format!(
                "covariance is {}x{}, expected {m}x{m}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let scale = cov.diagonal().amax().max(1e-12);
        for i in 0..m {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 * scale.max(1.0) {
                    return Err(Error::InvalidInput(format!(
                        "covariance asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Full sparse approximate posterior: inducing inputs, q(u), and the
/// hyperparameters, with the K_uu factorization cached. Immutable.
#[derive(Clone, Debug)]
pub struct SparseGPState {
    inducing: InducingSet,
    variational: VariationalState,
    hyper: Hyperparameters,
    chol: PsdCholesky,
    kinv: DMatrix<f64>,
    /// K_uu^-1 q_mean, the predictive-mean weights.
    weights: DVector<f64>,
    /// Cholesky factor of q_cov (kept for optimizer warm starts).
    cov_factor: DMatrix<f64>,
}

impl SparseGPState {
    pub fn new(
        inducing: InducingSet,
        variational: VariationalState,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        if variational.dim() != inducing.len() {
            return Err(Error::InvalidInput(format!(
                "q(u) dimension {} does not match {} inducing points",
                variational.dim(),
                inducing.len()
            )));
        }
        let kuu = rbf_matrix(inducing.points(), inducing.points(), &hyper);
        let chol = cholesky_psd(&kuu, &JitterPolicy::default())?;
        let kinv = chol.inverse();
        let weights = &kinv * variational.mean();
        let cov_factor = cholesky_psd(variational.cov(), &JitterPolicy::default())?.lower();
        Ok(Self { inducing, variational, hyper, chol, kinv, weights, cov_factor })
    }

    pub fn inducing(&self) -> &InducingSet {
        &self.inducing
    }

    pub fn variational(&self) -> &VariationalState {
        &self.variational
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub(crate) fn kuu_inverse(&self) -> &DMatrix<f64> {
        &self.kinv
    }

    pub(crate) fn kuu_chol(&self) -> &PsdCholesky {
        &self.chol
    }

    pub(crate) fn variational_params(&self) -> VariationalParams {
        VariationalParams { mean: self.variational.mean.clone(), l_cov: self.cov_factor.clone() }
    }

    /// Posterior mean and latent variance:
    /// mean = K_*u K_uu^-1 m, var = k_** - K_*u K_uu^-1 K_u* +
    /// K_*u K_uu^-1 S K_uu^-1 K_u*.
    pub fn predict(&self, query: &[Point]) -> Vec<PosteriorPrediction> {
        let sf2 = self.hyper.signal_variance();
        if query.is_empty() {
            return Vec::new();
        }
        let kq = rbf_matrix(self.inducing.points(), query, &self.hyper);
        let u = &self.kinv * &kq;
        let g = &self.variational.cov * &u;
        let mut out = Vec::with_capacity(query.len());
        for j in 0..query.len() {
            let kj = kq.column(j);
            let uj = u.column(j);
            let mean = kj.dot(&self.weights);
            let variance = (sf2 - kj.dot(&uj) + uj.dot(&g.column(j))).max(0.0);
            out.push(PosteriorPrediction { mean, variance });
        }
        out
    }
}

/// Collapsed SGPR bound: log N(y | 0, Q_yy) - tr(K_ff - Q_ff) / (2 s2),
/// evaluated through the standard stable factorization.
pub fn collapsed_elbo(
    data: &DataBatch,
    inducing: &InducingSet,
    hyper: &Hyperparameters,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("collapsed bound needs data".into()));
    }
    let n = data.len();
    let s2 = hyper.noise_variance();
    let sigma = s2.sqrt();

    let kuu = rbf_matrix(inducing.points(), inducing.points(), hyper);
    let chol = cholesky_psd(&kuu, &JitterPolicy::default())?;
    let kuf = rbf_matrix(inducing.points(), data.points(), hyper);
    let aw = chol.half_solve(&kuf) / sigma;
    let m = inducing.len();
    let mut b_mat = &aw * aw.transpose();
    for i in 0..m {
        b_mat[(i, i)] += 1.0;
    }
    let chol_b = cholesky_psd(&b_mat, &JitterPolicy::default())?;

    let y = data.values_vector();
    let bv = &aw * &y;
    let solved = chol_b.half_solve(&DMatrix::from_column_slice(m, 1, bv.as_slice()));
    let quad = (y.norm_squared() - solved.norm_squared()) / s2;
    let log_det_qyy = n as f64 * s2.ln() + chol_b.log_det();
    let trace = n as f64 * hyper.signal_variance() - s2 * aw.norm_squared();

    Ok(-0.5 * quad - 0.5 * log_det_qyy - 0.5 * n as f64 * LN_2PI - trace / (2.0 * s2))
}

/// Gradient of the collapsed bound over log-hyperparameters by central
/// differences; three parameters make this cheap and robust.
pub fn collapsed_elbo_gradient(
    data: &DataBatch,
    inducing: &InducingSet,
    hyper: &Hyperparameters,
) -> [f64; 3] {
    let objective = |logs: &[f64]| -> f64 {
        Hyperparameters::from_log(logs[0], logs[1], logs[2])
            .ok()
            .and_then(|h| collapsed_elbo(data, inducing, &h).ok())
            .unwrap_or(f64::NEG_INFINITY)
    };
    let g = central_difference(&objective, &hyper.log_vector(), 1e-5);
    [g[0], g[1], g[2]]
}

/// Uncollapsed minibatch bound:
/// (total_n / |batch|) E_q[log p(y_batch | f)] - KL[q(u) || p(u)].
pub fn svgp_elbo(batch: &DataBatch, state: &SparseGPState, total_n: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("svgp bound needs a nonempty batch".into()));
    }
    if total_n < batch.len() {
        return Err(Error::InvalidInput(format!(
            "total_n {} smaller than batch {}",
            total_n,
            batch.len()
        )));
    }
    let scale = total_n as f64 / batch.len() as f64;
    let ws = BoundWorkspace::new(
        state.inducing.points(),
        batch.points(),
        batch.values(),
        scale,
        None,
    );
    let tb = ws.prepare(state.hyper)?;
    Ok(ws.value(&tb, &state.variational_params()))
}

/// Analytic optimum of q(u) for the collapsed bound at fixed (Z, theta):
/// S = K_uu Sigma^-1 K_uu and m = Sigma^-1-weighted data projection, with
/// Sigma = K_uu + K_uf K_fu / s2.
pub fn sgpr_optimal_q(
    data: &DataBatch,
    inducing: &InducingSet,
    hyper: &Hyperparameters,
) -> Result<VariationalState> {
    let s2 = hyper.noise_variance();
    let kuu = rbf_matrix(inducing.points(), inducing.points(), hyper);
    let kuf = rbf_matrix(inducing.points(), data.points(), hyper);
    let sigma_mat = &kuu + (&kuf * kuf.transpose()) / s2;
    let chol = cholesky_psd(&sigma_mat, &JitterPolicy::default())?;
    let t = chol.solve(&kuu);
    let mut cov = &kuu * &t;
    let skew = (&cov - cov.transpose()) * 0.5;
    cov -= skew;
    let rhs = &kuf * data.values_vector() / s2;
    let mean = &kuu * chol.solve_vec(&rhs);
    VariationalState::new(mean, cov)
}

/// Offline sparse fit: inducing inputs from pivoted Cholesky over the data,
/// hyperparameters by ascent on the collapsed bound, q(u) at its analytic
/// optimum for the final (Z, theta).
pub fn fit_sgpr(
    data: &DataBatch,
    m: usize,
    init: Hyperparameters,
    opt: &OptimizerConfig,
) -> Result<(SparseGPState, FitReport)> {
    if m == 0 || m > data.len() {
        return Err(Error::InvalidInput(format!(
            "inducing count {m} out of range 1..={}",
            data.len()
        )));
    }
    let idx = pivoted_cholesky_select(data.points(), m, &init)?;
    let z: Vec<Point> = idx.iter().map(|&i| data.points()[i]).collect();
    let inducing = InducingSet::new(z)?;

    let objective = |logs: &[f64]| -> f64 {
        Hyperparameters::from_log(logs[0], logs[1], logs[2])
            .ok()
            .and_then(|h| collapsed_elbo(data, &inducing, &h).ok())
            .unwrap_or(f64::NEG_INFINITY)
    };
    let gradient = |logs: &[f64]| -> Vec<f64> {
        match Hyperparameters::from_log(logs[0], logs[1], logs[2]) {
            Ok(h) => collapsed_elbo_gradient(data, &inducing, &h).to_vec(),
            Err(_) => vec![f64::NAN; 3],
        }
    };
    let result = gradient_ascent(&objective, &gradient, &init.log_vector(), opt);
    let hyper = Hyperparameters::from_log(result.x[0], result.x[1], result.x[2])?;
    let q = sgpr_optimal_q(data, &inducing, &hyper)?;
    Ok((SparseGPState::new(inducing, q, hyper)?, result.report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::ExactGPState;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaChaRng;

    fn pt(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    fn random_batch(seed: u64, n: usize, span: f64) -> DataBatch {
        let mut rng = ChaChaRng::seed_from_u64(seed);
        let points: Vec<Point> = (0..n)
            .map(|_| pt(rng.gen_range(0.0..span), rng.gen_range(0.0..span)))
            .collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        DataBatch::new(points, values).unwrap()
    }

    #[test]
    fn collapsed_equals_lml_when_inducing_cover_data() {
        for seed in 0..8u64 {
            let data = random_batch(seed, 12, 50.0);
            let hyper = Hyperparameters::new(12.0, 1.2, 0.08).unwrap();
            let inducing = InducingSet::new(data.points().to_vec()).unwrap();
            let elbo = collapsed_elbo(&data, &inducing, &hyper).unwrap();
            let lml = ExactGPState::new(&data, hyper)
                .unwrap()
                .log_marginal_likelihood()
                .unwrap();
            assert!(
                (elbo - lml).abs() < 1e-6,
                "seed {seed}: elbo {elbo} vs lml {lml}"
            );
        }
    }

    #[test]
    fn collapsed_single_point_hand_formula() {
        // One datum and one inducing point at the same location: Q_yy is the
        // scalar sf2 + s2 and the trace term vanishes.
        let hyper = Hyperparameters::new(2.0, 1.3, 0.2).unwrap();
        let data = DataBatch::new(vec![pt(4.0, 4.0)], vec![0.7]).unwrap();
        let inducing = InducingSet::new(vec![pt(4.0, 4.0)]).unwrap();
        let elbo = collapsed_elbo(&data, &inducing, &hyper).unwrap();
        let var: f64 = 1.3 + 0.2;
        let expected = -0.5 * (LN_2PI + var.ln()) - 0.7 * 0.7 / (2.0 * var);
        assert_relative_eq!(elbo, expected, epsilon = 1e-8);
    }

    #[test]
    fn collapsed_never_exceeds_exact_lml() {
        let mut rng = ChaChaRng::seed_from_u64(42);
        for seed in 0..25u64 {
            let n = rng.gen_range(3usize..=20);
            let m = rng.gen_range(1usize..=n);
            let data = random_batch(seed, n, 60.0);
            let hyper = Hyperparameters::new(
                rng.gen_range(4.0..20.0),
                rng.gen_range(0.3..2.0),
                rng.gen_range(0.02..0.4),
            )
            .unwrap();
            let idx = pivoted_cholesky_select(data.points(), m, &hyper).unwrap();
            let z: Vec<Point> = idx.iter().map(|&i| data.points()[i]).collect();
            let inducing = InducingSet::new(z).unwrap();
            let elbo = collapsed_elbo(&data, &inducing, &hyper).unwrap();
            let lml = ExactGPState::new(&data, hyper)
                .unwrap()
                .log_marginal_likelihood()
                .unwrap();
            assert!(elbo <= lml + 1e-8, "seed {seed}: elbo {elbo} > lml {lml}");
        }
    }

    #[test]
    fn collapsed_monotone_in_greedy_inducing_count() {
        for seed in 0..5u64 {
            let data = random_batch(seed, 18, 50.0);
            let hyper = Hyperparameters::new(10.0, 1.0, 0.1).unwrap();
            let order = pivoted_cholesky_select(data.points(), data.len(), &hyper).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for m in 1..=data.len() {
                let z: Vec<Point> = order[..m].iter().map(|&i| data.points()[i]).collect();
                let inducing = InducingSet::new(z).unwrap();
                let elbo = collapsed_elbo(&data, &inducing, &hyper).unwrap();
                assert!(
                    elbo >= prev - 1e-7,
                    "seed {seed}: elbo dropped from {prev} to {elbo} at m={m}"
                );
                prev = elbo;
            }
        }
    }

    #[test]
    fn svgp_with_optimal_q_on_full_batch_matches_collapsed() {
        for seed in 0..6u64 {
            let data = random_batch(seed, 10, 40.0);
            let hyper = Hyperparameters::new(9.0, 1.1, 0.15).unwrap();
            let idx = pivoted_cholesky_select(data.points(), 5, &hyper).unwrap();
            let z: Vec<Point> = idx.iter().map(|&i| data.points()[i]).collect();
            let inducing = InducingSet::new(z).unwrap();
            let q = sgpr_optimal_q(&data, &inducing, &hyper).unwrap();
            let state = SparseGPState::new(inducing.clone(), q, hyper).unwrap();
            let svgp = svgp_elbo(&data, &state, data.len()).unwrap();
            let collapsed = collapsed_elbo(&data, &inducing, &hyper).unwrap();
            assert!(
                (svgp - collapsed).abs() < 1e-6,
                "seed {seed}: svgp {svgp} vs collapsed {collapsed}"
            );
        }
    }

    #[test]
    fn svgp_kl_term_vanishes_at_prior() {
        let data = random_batch(3, 6, 30.0);
        let hyper = Hyperparameters::new(8.0, 1.0, 0.1).unwrap();
        let z: Vec<Point> = data.points()[..3].to_vec();
        let inducing = InducingSet::new(z.clone()).unwrap();
        let kuu = rbf_matrix(&z, &z, &hyper);
        let prior_q = VariationalState::new(DVector::zeros(3), kuu).unwrap();
        let state = SparseGPState::new(inducing, prior_q, hyper).unwrap();

        // Bound with KL = 0 must equal the bare expected log-likelihood,
        // computed here directly.
        let value = svgp_elbo(&data, &state, data.len()).unwrap();
        let preds = state.predict(data.points());
        let s2 = hyper.noise_variance();
        let ell: f64 = preds
            .iter()
            .zip(data.values())
            .map(|(p, y)| {
                -0.5 * (LN_2PI + s2.ln()) - ((y - p.mean).powi(2) + p.variance) / (2.0 * s2)
            })
            .sum();
        assert!((value - ell).abs() < 1e-6, "value {value} vs ell {ell}");
    }

    #[test]
    fn predict_prior_q_returns_gp_prior() {
        let hyper = Hyperparameters::new(7.0, 1.4, 0.1).unwrap();
        let z = vec![pt(5.0, 5.0), pt(20.0, 11.0), pt(9.0, 30.0)];
        let kuu = rbf_matrix(&z, &z, &hyper);
        let q = VariationalState::new(DVector::zeros(3), kuu).unwrap();
        let state = SparseGPState::new(InducingSet::new(z).unwrap(), q, hyper).unwrap();
        for query in [pt(0.0, 0.0), pt(5.0, 5.0), pt(33.0, 18.0)] {
            let p = state.predict(&[query])[0];
            assert!(p.mean.abs() < 1e-9);
            assert!((p.variance - 1.4).abs() < 1e-6, "variance {}", p.variance);
        }
    }

    #[test]
    fn predict_matches_dense_identities() {
        let mut rng = ChaChaRng::seed_from_u64(17);
        for seed in 0..6u64 {
            let data = random_batch(seed, 8, 40.0);
            let hyper = Hyperparameters::new(10.0, 1.0, 0.1).unwrap();
            let z: Vec<Point> = data.points()[..4].to_vec();
            let inducing = InducingSet::new(z.clone()).unwrap();
            let q = sgpr_optimal_q(&data, &inducing, &hyper).unwrap();
            let state =
                SparseGPState::new(inducing, q.clone(), hyper).unwrap();

            let query = pt(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
            let got = state.predict(&[query])[0];

            // Dense evaluation of the same identities.
            let kuu = rbf_matrix(&z, &z, &hyper);
            let kinv = kuu.clone().try_inverse().unwrap();
            let kq = rbf_matrix(&z, &[query], &hyper);
            let mean = (kq.transpose() * &kinv * q.mean())[(0, 0)];
            let qq = (kq.transpose() * &kinv * &kq)[(0, 0)];
            let sq = (kq.transpose() * &kinv * q.cov() * &kinv * &kq)[(0, 0)];
            let var = hyper.signal_variance() - qq + sq;
            assert_relative_eq!(got.mean, mean, epsilon = 1e-7);
            assert_relative_eq!(got.variance, var, epsilon = 1e-7);
        }
    }

    #[test]
    fn fit_sgpr_full_capacity_recovers_exact_predictions() {
        let data = random_batch(2, 15, 50.0);
        let init = Hyperparameters::new(8.0, 1.0, 0.1).unwrap();
        let opt = OptimizerConfig { max_iters: 60, ..Default::default() };
        let (state, report) = fit_sgpr(&data, data.len(), init, &opt).unwrap();
        assert!(report.final_objective >= report.initial_objective);

        let exact = ExactGPState::new(&data, *state.hyperparameters()).unwrap();
        let mut rng = ChaChaRng::seed_from_u64(123);
        let held_out: Vec<Point> = (0..30)
            .map(|_| pt(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)))
            .collect();
        let sp = state.predict(&held_out);
        let ep = exact.predict(&held_out);
        let rmse = (sp
            .iter()
            .zip(&ep)
            .map(|(a, b)| (a.mean - b.mean).powi(2))
            .sum::<f64>()
            / held_out.len() as f64)
            .sqrt();
        assert!(rmse < 1e-5, "held-out rmse {rmse}");
    }

    #[test]
    fn fit_sgpr_ascends_and_stays_below_lml() {
        let data = random_batch(6, 50, 80.0);
        let init = Hyperparameters::new(10.0, 1.0, 0.1).unwrap();
        let opt = OptimizerConfig { max_iters: 40, ..Default::default() };
        let (state, report) = fit_sgpr(&data, 10, init, &opt).unwrap();
        assert!(report.final_objective >= report.initial_objective - 1e-12);
        let lml = ExactGPState::new(&data, *state.hyperparameters())
            .unwrap()
            .log_marginal_likelihood()
            .unwrap();
        assert!(report.final_objective <= lml + 1e-8);
    }
}

impl crate::data::MapPosterior for SparseGPState {
    fn predict_at(&self, points: &[Point]) -> Vec<PosteriorPrediction> {
        self.predict(points)
    }
}
