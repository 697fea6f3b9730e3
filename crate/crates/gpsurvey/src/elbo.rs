//! Shared machinery for the uncollapsed variational bounds: the minibatch
//! bound over a fresh batch and its online form with KL regularization
//! against the previous posterior. One workspace serves both; the online
//! case just carries an anchor built from the pre-update state.
//!
//! The bound is optimized over (log-hyperparameters, q mean, q covariance
//! factor). Variational gradients are closed-form; hyperparameter gradients
//! come either from adjoint accumulation (fast path) or central finite
//! differences (reference path), selected by `OptimizerConfig::hyper_grad`.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::kernel::{cholesky_psd, Hyperparameters, JitterPolicy, PsdCholesky};
use crate::optim::{central_difference, HyperGradMode, OptimizerConfig};
use crate::Point;

const LN_2PI: f64 = 1.8378770664093453;

/// Variational distribution q(u) = N(mean, L L^T) in optimizer form.
#[derive(Clone, Debug)]
pub(crate) struct VariationalParams {
    pub mean: DVector<f64>,
    /// Lower-triangular covariance factor (upper triangle zero).
    pub l_cov: DMatrix<f64>,
}

impl VariationalParams {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.l_cov * self.l_cov.transpose()
    }

    pub fn log_det_cov(&self) -> f64 {
        2.0 * self
            .l_cov
            .diagonal()
            .iter()
            .map(|v| v.abs().max(1e-300).ln())
            .sum::<f64>()
    }

    pub fn from_moments(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cholesky_psd(cov, &JitterPolicy::default())?;
        Ok(Self { mean, l_cov: chol.lower() })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// KL[N(m1,S1) || N(m2,S2)] from dense moments.
pub(crate) fn gaussian_kl(
    m1: &DVector<f64>,
    s1: &DMatrix<f64>,
    m2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let d = m1.len() as f64;
    let c1 = cholesky_psd(s1, &JitterPolicy::default())?;
    let c2 = cholesky_psd(s2, &JitterPolicy::default())?;
    let tr = c2.solve(s1).trace();
    let diff = m2 - m1;
    let quad = diff.dot(&c2.solve_vec(&diff));
    Ok(0.5 * (tr + quad - d + c2.log_det() - c1.log_det()))
}

/// Marginal of a sparse posterior q at arbitrary points, with full
/// covariance: mean = K_pu K_uu^-1 m, cov = K_pp - K_pu K_uu^-1 K_up
/// + K_pu K_uu^-1 S K_uu^-1 K_up. Also used to warm-start a new inducing
/// set from the previous posterior.
pub(crate) fn marginal_at(
    z: &[Point],
    q_mean: &DVector<f64>,
    q_cov: &DMatrix<f64>,
    hyper: &Hyperparameters,
    points: &[Point],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let kuu = crate::kernel::rbf_matrix(z, z, hyper);
    let chol = cholesky_psd(&kuu, &JitterPolicy::default())?;
    let kup = crate::kernel::rbf_matrix(z, points, hyper);
    let proj = chol.solve(&kup); // K_uu^-1 K_up  (m x p)
    let mean = proj.transpose() * q_mean;
    let kpp = crate::kernel::rbf_matrix(points, points, hyper);
    let mut cov = kpp - kup.transpose() * &proj + proj.transpose() * q_cov * &proj;
    // Symmetrize away round-off skew.
    let skew = (&cov - cov.transpose()) * 0.5;
    cov -= skew;
    Ok((mean, cov))
}

/// Old-posterior anchor for the online bound, fixed for the duration of one
/// update: everything here is evaluated at the pre-update hyperparameters.
#[derive(Clone, Debug)]
pub(crate) struct Anchor {
    pub z_old: Vec<Point>,
    /// (K(Z', Z'; theta_old) + jitter)^-1 and its log-determinant.
    pub prior_inv: DMatrix<f64>,
    pub prior_log_det: f64,
    /// S_q'^-1 and its log-determinant.
    pub post_inv: DMatrix<f64>,
    pub post_log_det: f64,
    pub post_mean: DVector<f64>,
    /// S_q'^-1 m_q'.
    pub post_inv_mean: DVector<f64>,
    /// m_q'^T S_q'^-1 m_q'.
    pub post_quad: f64,
    /// prior_inv - post_inv.
    pub x_diff: DMatrix<f64>,
}

impl Anchor {
    pub fn new(
        z_old: &[Point],
        q_mean: &DVector<f64>,
        q_cov: &DMatrix<f64>,
        hyper_old: &Hyperparameters,
    ) -> Result<Self> {
        let prior = crate::kernel::rbf_matrix(z_old, z_old, hyper_old);
        let prior_chol = cholesky_psd(&prior, &JitterPolicy::default())?;
        let post_chol = cholesky_psd(q_cov, &JitterPolicy::default())?;
        let prior_inv = prior_chol.inverse();
        let post_inv = post_chol.inverse();
        let post_inv_mean = &post_inv * q_mean;
        let post_quad = q_mean.dot(&post_inv_mean);
        let x_diff = &prior_inv - &post_inv;
        Ok(Self {
            z_old: z_old.to_vec(),
            prior_inv,
            prior_log_det: prior_chol.log_det(),
            post_inv,
            post_log_det: post_chol.log_det(),
            post_mean: q_mean.clone(),
            post_inv_mean,
            post_quad,
            x_diff,
        })
    }
}

/// Geometry fixed for the duration of one optimization: inducing inputs,
/// batch, anchor, and their pairwise squared distances.
pub(crate) struct BoundWorkspace<'a> {
    pub z: &'a [Point],
    pub batch_points: &'a [Point],
    pub y: DVector<f64>,
    /// Likelihood scale (total_n / batch for minibatching, 1 otherwise).
    pub scale: f64,
    pub anchor: Option<&'a Anchor>,
    d2_uu: DMatrix<f64>,
    d2_uf: DMatrix<f64>,
    d2_zu: DMatrix<f64>,
    d2_zz: DMatrix<f64>,
}

/// Everything that depends on the hyperparameters alone; rebuilt whenever a
/// hyperparameter step is taken, reused across variational-only steps.
pub(crate) struct ThetaBlock {
    pub hyper: Hyperparameters,
    pub kuu: DMatrix<f64>,
    pub chol: PsdCholesky,
    pub kinv: DMatrix<f64>,
    pub log_det_kuu: f64,
    pub kuf: DMatrix<f64>,
    /// A = K_uu^-1 K_uf.
    pub a: DMatrix<f64>,
    pub aat: DMatrix<f64>,
    pub ay: DVector<f64>,
    /// sum_i k_i^T A_i = tr(K_fu K_uu^-1 K_uf).
    pub q_diag_sum: f64,
    // Anchor-dependent blocks (empty matrices when no anchor).
    pub kzu: DMatrix<f64>,
    pub kzz: DMatrix<f64>,
    /// D = K_z'u K_uu^-1  (m_old x m).
    pub d: DMatrix<f64>,
    /// tr(X (K_z'z' - D K_uz')).
    pub tr_x_r: f64,
    /// M1 - M2 = D^T (V'^-1 - S_q'^-1) D.
    pub m12: DMatrix<f64>,
    /// D^T S_q'^-1 m_q'.
    pub w: DVector<f64>,
    /// X D with X = V'^-1 - S_q'^-1 (kept for the adjoint pass).
    pub xd: DMatrix<f64>,
    /// Constant part of the variational covariance-factor gradient:
    /// -scale AA^T/(2 s2) - Kinv/2 + M12/2.
    pub grad_l_const: DMatrix<f64>,
}

impl<'a> BoundWorkspace<'a> {
    pub fn new(
        z: &'a [Point],
        batch_points: &'a [Point],
        batch_values: &[f64],
        scale: f64,
        anchor: Option<&'a Anchor>,
    ) -> Self {
        let (d2_zu, d2_zz) = match anchor {
            Some(a) => (
                crate::kernel::sq_dist_matrix(&a.z_old, z),
                crate::kernel::sq_dist_matrix(&a.z_old, &a.z_old),
            ),
            None => (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)),
        };
        Self {
            z,
            batch_points,
            y: DVector::from_column_slice(batch_values),
            scale,
            anchor,
            d2_uu: crate::kernel::sq_dist_matrix(z, z),
            d2_uf: crate::kernel::sq_dist_matrix(z, batch_points),
            d2_zu,
            d2_zz,
        }
    }

    fn kernel_from_d2(&self, d2: &DMatrix<f64>, hyper: &Hyperparameters) -> DMatrix<f64> {
        let sf2 = hyper.signal_variance();
        let inv_2l2 = 0.5 / (hyper.lengthscale() * hyper.lengthscale());
        d2.map(|v| sf2 * (-v * inv_2l2).exp())
    }

    pub fn prepare(&self, hyper: Hyperparameters) -> Result<ThetaBlock> {
        let m = self.z.len();
        let kuu = self.kernel_from_d2(&self.d2_uu, &hyper);
        let chol = cholesky_psd(&kuu, &JitterPolicy::default())?;
        let kinv = chol.inverse();
        let log_det_kuu = chol.log_det();
        let kuf = self.kernel_from_d2(&self.d2_uf, &hyper);
        let a = chol.solve(&kuf);
        let aat = &a * a.transpose();
        let ay = &a * &self.y;
        let q_diag_sum = kuf.dot(&a);

        let (kzu, kzz, d, tr_x_r, m12, w, xd) = match self.anchor {
            Some(anchor) => {
                let kzu = self.kernel_from_d2(&self.d2_zu, &hyper);
                let kzz = self.kernel_from_d2(&self.d2_zz, &hyper);
                // D = K_z'u K_uu^-1 via solving on the transposed block.
                let d = chol.solve(&kzu.transpose()).transpose();
                let r = &kzz - &d * kzu.transpose();
                let tr_x_r = anchor.x_diff.dot(&r);
                let xd = &anchor.x_diff * &d;
                let m12 = d.transpose() * &xd;
                let w = d.transpose() * &anchor.post_inv_mean;
                (kzu, kzz, d, tr_x_r, m12, w, xd)
            }
            None => (
                DMatrix::zeros(0, m),
                DMatrix::zeros(0, 0),
                DMatrix::zeros(0, m),
                0.0,
                DMatrix::zeros(m, m),
                DVector::zeros(m),
                DMatrix::zeros(0, m),
            ),
        };

        let s2 = hyper.noise_variance();
        let mut grad_l_const = &m12 * 0.5 - &kinv * 0.5;
        grad_l_const -= &aat * (self.scale / (2.0 * s2));

        Ok(ThetaBlock {
            hyper,
            kuu,
            chol,
            kinv,
            log_det_kuu,
            kuf,
            a,
            aat,
            ay,
            q_diag_sum,
            kzu,
            kzz,
            d,
            tr_x_r,
            m12,
            w,
            xd,
            grad_l_const,
        })
    }

    /// Bound value. The two old-posterior KL terms are evaluated in their
    /// combined form (the log det S' pieces cancel exactly).
    pub fn value(&self, tb: &ThetaBlock, q: &VariationalParams) -> f64 {
        let m = q.dim() as f64;
        let s = q.covariance();
        let s2 = tb.hyper.noise_variance();
        let sf2 = tb.hyper.signal_variance();
        let b = self.batch_points.len() as f64;

        // Expected log-likelihood of the batch.
        let mu = tb.a.transpose() * &q.mean;
        let r = &self.y - &mu;
        let var_sum = b * sf2 - tb.q_diag_sum + tb.aat.dot(&s);
        let ell = self.scale
            * (-0.5 * b * (LN_2PI + s2.ln()) - (r.norm_squared() + var_sum) / (2.0 * s2));

        // KL[q(u) || p(u)].
        let kinv_m = &tb.kinv * &q.mean;
        let kl_new = 0.5
            * (tb.kinv.dot(&s) + q.mean.dot(&kinv_m) - m + tb.log_det_kuu - q.log_det_cov());

        let delta = match self.anchor {
            Some(anchor) => {
                let quad = q.mean.dot(&(&tb.m12 * &q.mean));
                0.5 * (tb.tr_x_r
                    + tb.m12.dot(&s)
                    + quad
                    + 2.0 * q.mean.dot(&tb.w)
                    - anchor.post_quad
                    + anchor.prior_log_det
                    - anchor.post_log_det)
            }
            None => 0.0,
        };

        let v = ell - kl_new + delta;
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Closed-form gradient w.r.t. the variational parameters.
    pub fn grad_q(&self, tb: &ThetaBlock, q: &VariationalParams) -> (DVector<f64>, DMatrix<f64>) {
        let s2 = tb.hyper.noise_variance();
        let mu = tb.a.transpose() * &q.mean;
        let r = &self.y - &mu;

        // d/dm: scale A r / s2 - Kinv m + M12 m + w.
        let mut g_mean = &tb.a * r * (self.scale / s2);
        g_mean -= &tb.kinv * &q.mean;
        g_mean += &tb.m12 * &q.mean;
        g_mean += &tb.w;

        // d/dL = 2 (grad_l_const) L + L^-T, kept lower-triangular.
        let m = q.dim();
        let mut g_l = (&tb.grad_l_const * &q.l_cov) * 2.0;
        let eye = DMatrix::identity(m, m);
        let l_inv = q
            .l_cov
            .solve_lower_triangular(&eye)
            .expect("factor diagonal nonzero");
        g_l += l_inv.transpose();
        for i in 0..m {
            for j in (i + 1)..m {
                g_l[(i, j)] = 0.0;
            }
        }
        (g_mean, g_l)
    }

    /// Hyperparameter gradient by adjoint accumulation. Returns
    /// d bound / d [log lengthscale, log signal variance, log noise variance].
    pub fn grad_hyper_analytic(&self, tb: &ThetaBlock, q: &VariationalParams) -> [f64; 3] {
        let s2 = tb.hyper.noise_variance();
        let sf2 = tb.hyper.signal_variance();
        let ell2 = tb.hyper.lengthscale() * tb.hyper.lengthscale();
        let sc = self.scale;
        let b = self.batch_points.len() as f64;
        let m = q.dim();

        let s = q.covariance();
        let mu = tb.a.transpose() * &q.mean;
        let r = &self.y - &mu;
        let pm = &tb.kinv * &q.mean; // P m
        let ar = &tb.a * &r;
        let ps = &tb.kinv * &s;
        let psa = &ps * &tb.a;

        // Adjoints psi_B with d(bound) = sum_B <psi_B, dB> (elementwise).
        // Likelihood terms.
        let mut psi_uu = DMatrix::<f64>::zeros(m, m);
        // -(sc/s2) (P m)(A r)^T  [residual through mu]
        psi_uu.gemm(-sc / s2, &pm, &ar.transpose(), 1.0);
        // -(sc/(2 s2)) A A^T    [trace of Q_ff]
        psi_uu += &tb.aat * (-sc / (2.0 * s2));
        // +(sc/s2) (P S A) A^T  [S-quadratic part of the marginal variance]
        psi_uu.gemm(sc / s2, &psa, &tb.a.transpose(), 1.0);
        // KL[q||p]: +P S P / 2 + (P m)(P m)^T / 2 - P / 2.
        psi_uu.gemm(0.5, &ps, &tb.kinv, 1.0);
        psi_uu.gemm(0.5, &pm, &pm.transpose(), 1.0);
        psi_uu += &tb.kinv * (-0.5);

        let mut psi_uf = &tb.kinv * &q.mean * r.transpose() * (sc / s2); // (P m) r^T
        psi_uf += &tb.a * (sc / s2);
        psi_uf -= &psa * (sc / s2);

        let mut psi_zu = DMatrix::<f64>::zeros(tb.d.nrows(), m);
        let mut psi_zz = DMatrix::<f64>::zeros(tb.d.nrows(), tb.d.nrows());
        if let Some(anchor) = self.anchor {
            let m_old = anchor.post_mean.clone();
            let mprime = &tb.d * &q.mean;
            let vinv_mp = &anchor.prior_inv * &mprime;
            let sinv_diff = &anchor.post_inv * (&mprime - &m_old);

            // tr(X S') pieces.
            psi_zz += &anchor.x_diff * 0.5;
            psi_zu -= &tb.xd; // from -tr(X K_z'u P K_uz')
            let xds = &tb.xd * &s;
            psi_zu.gemm(1.0, &xds, &tb.kinv, 1.0); // + X D S P
            let dt_xd = &tb.m12; // D^T X D
            psi_uu += dt_xd * 0.5;
            // -sym(D^T X D S P); S P = (P S)^T since both are symmetric.
            let dxdsp = dt_xd * ps.transpose();
            psi_uu -= (&dxdsp + dxdsp.transpose()) * 0.5;

            // Mean quadratics.
            psi_zu.gemm(1.0, &vinv_mp, &pm.transpose(), 1.0);
            psi_zu.gemm(-1.0, &sinv_diff, &pm.transpose(), 1.0);
            let dt_v = tb.d.transpose() * &vinv_mp;
            psi_uu.gemm(-1.0, &dt_v, &pm.transpose(), 1.0);
            let dt_s = tb.d.transpose() * &sinv_diff;
            psi_uu.gemm(1.0, &dt_s, &pm.transpose(), 1.0);
        }

        // Chain through the RBF blocks. dK/dlog(l) = K .* D2 / l^2,
        // dK/dlog(sf2) = K; the diagonal contributes to sf2 only.
        let mut g_l = 0.0;
        let mut g_s = 0.0;
        let dot_block = |psi: &DMatrix<f64>, k: &DMatrix<f64>, d2: &DMatrix<f64>| -> (f64, f64) {
            let mut gl = 0.0;
            let mut gs = 0.0;
            for idx in 0..k.len() {
                let pk = psi[idx] * k[idx];
                gl += pk * d2[idx];
                gs += pk;
            }
            (gl / ell2, gs)
        };
        let (gl, gs) = dot_block(&psi_uu, &tb.kuu, &self.d2_uu);
        g_l += gl;
        g_s += gs;
        let (gl, gs) = dot_block(&psi_uf, &tb.kuf, &self.d2_uf);
        g_l += gl;
        g_s += gs;
        if self.anchor.is_some() {
            let (gl, gs) = dot_block(&psi_zu, &tb.kzu, &self.d2_zu);
            g_l += gl;
            g_s += gs;
            let (gl, gs) = dot_block(&psi_zz, &tb.kzz, &self.d2_zz);
            g_l += gl;
            g_s += gs;
        }
        // Diagonal k(x_i, x_i) = sf2 inside the likelihood variance sum.
        g_s += -sc / (2.0 * s2) * b * sf2;

        // Noise gradient is purely from the likelihood term.
        let var_sum = b * sf2 - tb.q_diag_sum + tb.aat.dot(&s);
        let g_n = sc * (-0.5 * b + (r.norm_squared() + var_sum) / (2.0 * s2));

        [g_l, g_s, g_n]
    }

    /// Stationary point of the bound in q at fixed hyperparameters: the
    /// precision is Kinv + scale AA^T / s2 - M12 and the mean solves the
    /// matching linear system. This is where a unit natural-gradient step
    /// lands, so the optimizer uses it as the variational trial point.
    pub fn conjugate_optimum(&self, tb: &ThetaBlock) -> Result<VariationalParams> {
        let s2 = tb.hyper.noise_variance();
        let mut prec = &tb.kinv - &tb.m12;
        prec += &tb.aat * (self.scale / s2);
        let skew = (&prec - prec.transpose()) * 0.5;
        prec -= skew;
        let chol = cholesky_psd(&prec, &JitterPolicy::default())?;
        let rhs = &tb.ay * (self.scale / s2) + &tb.w;
        let mean = chol.solve_vec(&rhs);
        let mut cov = chol.inverse();
        let skew = (&cov - cov.transpose()) * 0.5;
        cov -= skew;
        let l_cov = cholesky_psd(&cov, &JitterPolicy::default())?.lower();
        Ok(VariationalParams { mean, l_cov })
    }

    /// Reference hyperparameter gradient by central differences.
    pub fn grad_hyper_fd(&self, hyper: &Hyperparameters, q: &VariationalParams) -> [f64; 3] {
        let objective = |logs: &[f64]| -> f64 {
            match Hyperparameters::from_log(logs[0], logs[1], logs[2]) {
                Ok(h) => match self.prepare(h) {
                    Ok(tb) => self.value(&tb, q),
                    Err(_) => f64::NEG_INFINITY,
                },
                Err(_) => f64::NEG_INFINITY,
            }
        };
        let g = central_difference(&objective, &hyper.log_vector(), 1e-5);
        [g[0], g[1], g[2]]
    }
}

pub(crate) struct BoundFit {
    pub hyper: Hyperparameters,
    pub q: VariationalParams,
    pub value: f64,
    pub steps_accepted: usize,
    pub improved: bool,
}

/// Ascent on (hyperparameters, variational parameters) with a fixed base
/// step and backtracking. Variational coordinates take natural-gradient
/// steps: the unit trial point is the bound's conjugate stationary point at
/// the current hyperparameters, with moment-space backtracking toward the
/// previous q on the rare numerical rejection. Hyperparameter coordinates
/// take plain gradient steps every ceil(m / hyper_stride_points) iterations
/// so their factorization cost amortizes over the schedule.
pub(crate) fn optimize_bound(
    ws: &BoundWorkspace,
    hyper0: Hyperparameters,
    q0: VariationalParams,
    opt: &OptimizerConfig,
) -> Result<BoundFit> {
    let m = q0.dim();
    let stride = (m + opt.hyper_stride_points - 1) / opt.hyper_stride_points;
    let stride = stride.clamp(1, opt.streaming_steps.max(1));

    let mut hyper = hyper0;
    let mut q = q0;
    let mut tb = ws.prepare(hyper)?;
    let mut value = ws.value(&tb, &q);
    let initial = value;
    let mut accepted = 0;

    let try_variational_jump = |ws: &BoundWorkspace,
                                tb: &ThetaBlock,
                                q: &mut VariationalParams,
                                value: &mut f64|
     -> bool {
        let target = match ws.conjugate_optimum(tb) {
            Ok(t) => t,
            Err(_) => return false,
        };
        let cov_now = q.covariance();
        let cov_target = target.covariance();
        let mut s = 1.0;
        for _ in 0..=4 {
            let trial = if s == 1.0 {
                target.clone()
            } else {
                let mean = &q.mean + (&target.mean - &q.mean) * s;
                let cov = &cov_now + (&cov_target - &cov_now) * s;
                match VariationalParams::from_moments(mean, &cov) {
                    Ok(t) => t,
                    Err(_) => {
                        s *= 0.5;
                        continue;
                    }
                }
            };
            let tv = ws.value(tb, &trial);
            if tv.is_finite() && tv >= *value {
                let moved = tv > *value + 1e-12 * value.abs().max(1.0);
                *q = trial;
                *value = tv;
                return moved;
            }
            s *= 0.5;
        }
        false
    };

    if try_variational_jump(ws, &tb, &mut q, &mut value) {
        accepted += 1;
    }

    for step in 0..opt.streaming_steps {
        if step % stride != 0 {
            // Variational coordinates are already at their conditional
            // optimum for the current hyperparameters.
            continue;
        }
        let g_h = match opt.hyper_grad {
            HyperGradMode::Analytic => ws.grad_hyper_analytic(&tb, &q),
            HyperGradMode::CentralDiff => ws.grad_hyper_fd(&hyper, &q),
        };
        if !g_h.iter().all(|v| v.is_finite()) {
            break;
        }

        let mut s = opt.streaming_step_size;
        for _ in 0..=opt.backtracks {
            let logs = hyper.log_vector();
            let trial_hyper = match Hyperparameters::from_log(
                logs[0] + s * g_h[0],
                logs[1] + s * g_h[1],
                logs[2] + s * g_h[2],
            ) {
                Ok(h) => h,
                Err(_) => {
                    s *= 0.5;
                    continue;
                }
            };
            let trial_tb = match ws.prepare(trial_hyper) {
                Ok(t) => t,
                Err(_) => {
                    s *= 0.5;
                    continue;
                }
            };
            let tv = ws.value(&trial_tb, &q);
            if tv.is_finite() && tv > value {
                hyper = trial_hyper;
                tb = trial_tb;
                value = tv;
                accepted += 1;
                if try_variational_jump(ws, &tb, &mut q, &mut value) {
                    accepted += 1;
                }
                break;
            }
            s *= 0.5;
        }
    }

    Ok(BoundFit { hyper, q, value, steps_accepted: accepted, improved: value > initial })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::rbf_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaChaRng;

    fn pt(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    fn random_setup(
        seed: u64,
        m: usize,
        b: usize,
        with_anchor: bool,
    ) -> (Vec<Point>, Vec<Point>, Vec<f64>, Hyperparameters, VariationalParams, Option<Anchor>)
    {
        let mut rng = ChaChaRng::seed_from_u64(seed);
        let z: Vec<Point> = (0..m)
            .map(|_| pt(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)))
            .collect();
        let xb: Vec<Point> = (0..b)
            .map(|_| pt(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)))
            .collect();
        let yb: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let hyper = Hyperparameters::new(
            rng.gen_range(5.0..20.0),
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.02..0.3),
        )
        .unwrap();

        let mean = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let mut l = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                l[(i, j)] = if i == j {
                    rng.gen_range(0.3..1.0)
                } else {
                    rng.gen_range(-0.2..0.2)
                };
            }
        }
        let q = VariationalParams { mean, l_cov: l };

        let anchor = if with_anchor {
            let m_old = m.max(2) - 1;
            let z_old: Vec<Point> = (0..m_old)
                .map(|_| pt(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)))
                .collect();
            let hyper_old = Hyperparameters::new(
                hyper.lengthscale() * 1.1,
                hyper.signal_variance() * 0.9,
                hyper.noise_variance(),
            )
            .unwrap();
            let prior_old = rbf_matrix(&z_old, &z_old, &hyper_old);
            // A synthetic but valid old posterior: shrink the prior and
            // shift the mean, so S_q' < V' holds.
            let cov_old = &prior_old * 0.5;
            let mean_old = DVector::from_fn(m_old, |_, _| rng.gen_range(-0.5..0.5));
            Some(Anchor::new(&z_old, &mean_old, &cov_old, &hyper_old).unwrap())
        } else {
            None
        };
        (z, xb, yb, hyper, q, anchor)
    }

    #[test]
    fn prior_q_zero_targets_matches_hand_formula() {
        // With q(u) = p(u) the KL term is zero, and with y = 0, q_mean = 0
        // the expected log-likelihood reduces to
        // -(b/2) log(2 pi s2) - sum(var_i) / (2 s2).
        let (z, xb, _, hyper, _, _) = random_setup(5, 4, 6, false);
        let yb = vec![0.0; 6];
        let kuu = rbf_matrix(&z, &z, &hyper);
        let q = VariationalParams::from_moments(DVector::zeros(4), &kuu).unwrap();
        let ws = BoundWorkspace::new(&z, &xb, &yb, 1.0, None);
        let tb = ws.prepare(hyper).unwrap();
        let value = ws.value(&tb, &q);

        // Hand evaluation.
        let s2 = hyper.noise_variance();
        let chol = cholesky_psd(&kuu, &JitterPolicy::default()).unwrap();
        let kuf = rbf_matrix(&z, &xb, &hyper);
        let a = chol.solve(&kuf);
        let s = q.covariance();
        let mut var_sum = 0.0;
        for i in 0..xb.len() {
            let ai = a.column(i);
            let ki = kuf.column(i);
            var_sum += hyper.signal_variance() - ki.dot(&ai)
                + (ai.transpose() * &s * ai)[(0, 0)];
        }
        let expected = -0.5 * 6.0 * (LN_2PI + s2.ln()) - var_sum / (2.0 * s2);
        // KL[q||p] is not exactly zero because of jitter; allow that slack.
        assert!(
            (value - expected).abs() < 1e-6,
            "engine value {value} vs hand formula {expected}"
        );
    }

    #[test]
    fn grad_q_matches_finite_differences() {
        for (seed, with_anchor) in [(1u64, false), (2, true), (3, true), (4, false)] {
            let (z, xb, yb, hyper, q, anchor) = random_setup(seed, 4, 5, with_anchor);
            let ws = BoundWorkspace::new(&z, &xb, &yb, 1.3, anchor.as_ref());
            let tb = ws.prepare(hyper).unwrap();
            let (g_mean, g_l) = ws.grad_q(&tb, &q);

            let m = q.dim();
            let h = 1e-6;
            for i in 0..m {
                let mut qa = q.clone();
                let mut qb = q.clone();
                qa.mean[i] += h;
                qb.mean[i] -= h;
                let fd = (ws.value(&tb, &qa) - ws.value(&tb, &qb)) / (2.0 * h);
                assert!(
                    (fd - g_mean[i]).abs() < 1e-5 * fd.abs().max(g_mean[i].abs()).max(1.0),
                    "seed {seed} mean[{i}]: fd {fd} vs analytic {}",
                    g_mean[i]
                );
            }
            for i in 0..m {
                for j in 0..=i {
                    let mut qa = q.clone();
                    let mut qb = q.clone();
                    qa.l_cov[(i, j)] += h;
                    qb.l_cov[(i, j)] -= h;
                    let fd = (ws.value(&tb, &qa) - ws.value(&tb, &qb)) / (2.0 * h);
                    let g = g_l[(i, j)];
                    assert!(
                        (fd - g).abs() < 1e-5 * fd.abs().max(g.abs()).max(1.0),
                        "seed {seed} L[({i},{j})]: fd {fd} vs analytic {g}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_hyper_analytic_matches_finite_differences() {
        for (seed, with_anchor, scale) in
            [(10u64, false, 1.0), (11, true, 1.0), (12, true, 2.5), (13, false, 4.0), (14, true, 1.0)]
        {
            let (z, xb, yb, hyper, q, anchor) = random_setup(seed, 5, 7, with_anchor);
            let ws = BoundWorkspace::new(&z, &xb, &yb, scale, anchor.as_ref());
            let tb = ws.prepare(hyper).unwrap();
            let analytic = ws.grad_hyper_analytic(&tb, &q);
            let fd = ws.grad_hyper_fd(&hyper, &q);
            for i in 0..3 {
                let denom = analytic[i].abs().max(fd[i].abs()).max(1e-6);
                assert!(
                    (analytic[i] - fd[i]).abs() / denom < 1e-3,
                    "seed {seed} component {i}: analytic {} vs fd {}",
                    analytic[i],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn optimize_bound_improves_value() {
        let (z, xb, yb, hyper, q, anchor) = random_setup(21, 5, 10, true);
        let ws = BoundWorkspace::new(&z, &xb, &yb, 1.0, anchor.as_ref());
        let tb = ws.prepare(hyper).unwrap();
        let before = ws.value(&tb, &q);
        let fit = optimize_bound(&ws, hyper, q, &OptimizerConfig::default()).unwrap();
        assert!(fit.value >= before, "bound went from {before} to {}", fit.value);
        assert!(fit.steps_accepted > 0);
    }

    #[test]
    fn conjugate_optimum_is_stationary_and_dominant() {
        for (seed, with_anchor) in [(31u64, false), (32, true), (33, true)] {
            let (z, xb, yb, hyper, q, anchor) = random_setup(seed, 4, 6, with_anchor);
            let ws = BoundWorkspace::new(&z, &xb, &yb, 1.0, anchor.as_ref());
            let tb = ws.prepare(hyper).unwrap();
            let qstar = ws.conjugate_optimum(&tb).unwrap();
            let v_star = ws.value(&tb, &qstar);
            let v_other = ws.value(&tb, &q);
            assert!(v_star >= v_other - 1e-9, "optimum {v_star} below arbitrary q {v_other}");

            let (g_mean, _) = ws.grad_q(&tb, &qstar);
            assert!(
                g_mean.amax() < 1e-6,
                "seed {seed}: mean gradient at optimum not zero: {}",
                g_mean.amax()
            );
        }
    }
}
