//! Streaming sparse GP: each data batch is used once to update the
//! posterior and then discarded. The update keeps the inducing count at a
//! configured fraction of everything observed so far (capped), reselects
//! inducing inputs by pivoted Cholesky over the old set plus the new batch,
//! and ascends the online bound that regularizes against the pre-update
//! posterior instead of the forgotten data.

use nalgebra::{DMatrix, DVector};

use crate::data::{DataBatch, PosteriorPrediction};
use crate::elbo::{gaussian_kl, marginal_at, optimize_bound, Anchor, BoundWorkspace, VariationalParams};
use crate::error::{Error, Result};
use crate::kernel::{pivoted_cholesky_select, rbf_matrix, Hyperparameters};
use crate::optim::OptimizerConfig;
use crate::sparse::{InducingSet, SparseGPState, VariationalState};
use crate::Point;

/// Growth policy for the inducing set.
#[derive(Clone, Copy, Debug)]
pub struct StreamingConfig {
    /// Target inducing count as a fraction of total observed measurements.
    pub inducing_fraction: f64,
    /// Hard cap keeping long missions from reintroducing cubic growth.
    pub inducing_cap: usize,
}

impl Default for StreamingConfig {
    fn default() -> Self {
        Self { inducing_fraction: 0.15, inducing_cap: 500 }
    }
}

/// Outcome of the most recent update attempt.
#[derive(Clone, Debug, PartialEq)]
pub enum UpdateEvent {
    NeverUpdated,
    Applied { inducing: usize, batch: usize, bound: f64 },
    Skipped { reason: String },
}

/// Streaming posterior plus the snapshot of the state that preceded the
/// last update. Raw measurements are never retained.
#[derive(Clone, Debug)]
pub struct StreamingGPState {
    current: Option<SparseGPState>,
    snapshot: Option<SparseGPState>,
    hyper: Hyperparameters,
    total_observed: usize,
    config: StreamingConfig,
    last_update: UpdateEvent,
}

impl StreamingGPState {
    pub fn new(init: Hyperparameters, config: StreamingConfig) -> Self {
        Self {
            current: None,
            snapshot: None,
            hyper: init,
            total_observed: 0,
            config,
            last_update: UpdateEvent::NeverUpdated,
        }
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn total_observed(&self) -> usize {
        self.total_observed
    }

    pub fn inducing_count(&self) -> usize {
        self.current.as_ref().map_or(0, |s| s.inducing().len())
    }

    pub fn config(&self) -> &StreamingConfig {
        &self.config
    }

    pub fn last_update(&self) -> &UpdateEvent {
        &self.last_update
    }

    pub fn posterior(&self) -> Option<&SparseGPState> {
        self.current.as_ref()
    }

    pub fn snapshot(&self) -> Option<&SparseGPState> {
        self.snapshot.as_ref()
    }

    /// Raw measurements retained inside the state. Structurally zero: the
    /// state stores only inducing inputs, q(u), hyperparameters, and the
    /// previous snapshot. Kept as a method so audits can assert it.
    pub fn retained_raw_measurements(&self) -> usize {
        0
    }

    /// Prediction delegates to the sparse posterior; a never-updated state
    /// returns the prior.
    pub fn predict(&self, query: &[Point]) -> Vec<PosteriorPrediction> {
        match &self.current {
            Some(state) => state.predict(query),
            None => query
                .iter()
                .map(|_| PosteriorPrediction { mean: 0.0, variance: self.hyper.signal_variance() })
                .collect(),
        }
    }

    /// Consume one batch: grow the inducing set, reselect by pivoted
    /// Cholesky over old Z plus the batch, ascend the online bound, and
    /// discard the batch. Optimizer trouble retains the previous posterior
    /// and marks the update skipped; the batch is then not counted.
    pub fn updated(&self, batch: &DataBatch, opt: &OptimizerConfig) -> StreamingGPState {
        match self.try_update(batch, opt) {
            Ok(next) => next,
            Err(e) => {
                let mut kept = self.clone();
                kept.last_update = UpdateEvent::Skipped { reason: e.to_string() };
                kept
            }
        }
    }

    fn try_update(&self, batch: &DataBatch, opt: &OptimizerConfig) -> Result<StreamingGPState> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("update needs a nonempty batch".into()));
        }
        let total_after = self.total_observed + batch.len();

        // Candidate pool: old inducing inputs plus the new batch.
        let mut pool: Vec<Point> = Vec::new();
        if let Some(cur) = &self.current {
            pool.extend_from_slice(cur.inducing().points());
        }
        pool.extend_from_slice(batch.points());

        let target = (self.config.inducing_fraction * total_after as f64).ceil() as usize;
        let m = target.clamp(1, self.config.inducing_cap).min(pool.len());

        let hyper0 = self.current.as_ref().map_or(self.hyper, |c| *c.hyperparameters());
        let picked = pivoted_cholesky_select(&pool, m, &hyper0)?;
        let z_new: Vec<Point> = picked.iter().map(|&i| pool[i]).collect();

        // Warm-start q(u) at the previous posterior's marginal on the new
        // inducing set (the prior for the first update).
        let q0 = match &self.current {
            Some(cur) => {
                let (mean, cov) = marginal_at(
                    cur.inducing().points(),
                    cur.variational().mean(),
                    cur.variational().cov(),
                    cur.hyperparameters(),
                    &z_new,
                )?;
                VariationalParams::from_moments(mean, &cov)?
            }
            None => {
                let kzz = rbf_matrix(&z_new, &z_new, &hyper0);
                VariationalParams::from_moments(DVector::zeros(m), &kzz)?
            }
        };

        let anchor = match &self.current {
            Some(cur) => Some(Anchor::new(
                cur.inducing().points(),
                cur.variational().mean(),
                cur.variational().cov(),
                cur.hyperparameters(),
            )?),
            None => None,
        };

        let ws = BoundWorkspace::new(&z_new, batch.points(), batch.values(), 1.0, anchor.as_ref());
        let fit = optimize_bound(&ws, hyper0, q0, opt)?;
        if !fit.value.is_finite() {
            return Err(Error::Numerical("online bound diverged".into()));
        }

        let variational = VariationalState::new(fit.q.mean.clone(), fit.q.covariance())?;
        let next_state =
            SparseGPState::new(InducingSet::new(z_new)?, variational, fit.hyper)?;

        Ok(StreamingGPState {
            current: Some(next_state),
            snapshot: self.current.clone(),
            hyper: fit.hyper,
            total_observed: total_after,
            config: self.config,
            last_update: UpdateEvent::Applied {
                inducing: m,
                batch: batch.len(),
                bound: fit.value,
            },
        })
    }
}

/// The four closed-form terms of the online bound.
#[derive(Clone, Copy, Debug)]
pub struct OnlineElboTerms {
    /// E_q(f) [log p(y_new | f)].
    pub expected_log_lik: f64,
    /// KL[q(u) || p(u)] at the candidate hyperparameters.
    pub kl_new_prior: f64,
    /// KL[q(u') || p(u')] against the old prior at the old inducing inputs.
    pub kl_old_prior: f64,
    /// KL[q(u') || q'(u')] against the old posterior.
    pub kl_old_posterior: f64,
}

impl OnlineElboTerms {
    pub fn total(&self) -> f64 {
        self.expected_log_lik - self.kl_new_prior + self.kl_old_prior - self.kl_old_posterior
    }
}

/// Online bound for a candidate posterior given the pre-update snapshot,
/// with every term reported separately. With no previous posterior the two
/// old-inducing terms cancel by construction and the bound reduces to the
/// fresh-batch form. An empty batch is allowed and zeroes the likelihood
/// term.
pub fn online_elbo(
    new_batch: &DataBatch,
    candidate: &SparseGPState,
    previous: Option<&SparseGPState>,
) -> Result<OnlineElboTerms> {
    let hyper = candidate.hyperparameters();
    let s2 = hyper.noise_variance();

    let mut ell = 0.0;
    if !new_batch.is_empty() {
        let preds = candidate.predict(new_batch.points());
        for (p, y) in preds.iter().zip(new_batch.values()) {
            ell += -0.5 * (2.0 * std::f64::consts::PI * s2).ln()
                - ((y - p.mean) * (y - p.mean) + p.variance) / (2.0 * s2);
        }
    }

    let z = candidate.inducing().points();
    let m = z.len();
    let kuu = rbf_matrix(z, z, hyper);
    let kl_new_prior = gaussian_kl(
        candidate.variational().mean(),
        candidate.variational().cov(),
        &DVector::zeros(m),
        &kuu,
    )?;

    let (kl_old_prior, kl_old_posterior) = match previous {
        Some(prev) => {
            let z_old = prev.inducing().points();
            let (marg_mean, marg_cov) = marginal_at(
                z,
                candidate.variational().mean(),
                candidate.variational().cov(),
                hyper,
                z_old,
            )?;
            let old_prior = rbf_matrix(z_old, z_old, prev.hyperparameters());
            let kl_prior = gaussian_kl(
                &marg_mean,
                &marg_cov,
                &DVector::zeros(z_old.len()),
                &old_prior,
            )?;
            let kl_post = gaussian_kl(
                &marg_mean,
                &marg_cov,
                prev.variational().mean(),
                prev.variational().cov(),
            )?;
            (kl_prior, kl_post)
        }
        None => (0.0, 0.0),
    };

    Ok(OnlineElboTerms { expected_log_lik: ell, kl_new_prior, kl_old_prior, kl_old_posterior })
}

// --- text checkpoint format -------------------------------------------------

fn write_hyper(out: &mut String, hyper: &Hyperparameters) {
    let v = hyper.log_vector();
    out.push_str(&format!("hyper {} {} {}\n", v[0], v[1], v[2]));
}

fn write_sparse(out: &mut String, tag: &str, state: &SparseGPState) {
    let m = state.inducing().len();
    out.push_str(&format!("{tag} {m}\n"));
    for p in state.inducing().points() {
        out.push_str(&format!("{} {}\n", p.x, p.y));
    }
    let mean = state.variational().mean();
    let cells: Vec<String> = mean.iter().map(|v| v.to_string()).collect();
    out.push_str(&cells.join(" "));
    out.push('\n');
    let cov = state.variational().cov();
    for i in 0..m {
        let row: Vec<String> = (0..m).map(|j| cov[(i, j)].to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    write_hyper(out, state.hyperparameters());
}

impl StreamingGPState {
    /// Text checkpoint: newline-delimited, shortest-roundtrip decimal floats,
    /// no binary. Round-trips bit-identically through `from_text`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("SSGP v1\n");
        out.push_str(&format!("total_observed {}\n", self.total_observed));
        out.push_str(&format!(
            "config {} {}\n",
            self.config.inducing_fraction, self.config.inducing_cap
        ));
        write_hyper(&mut out, &self.hyper);
        match &self.current {
            Some(s) => write_sparse(&mut out, "current", s),
            None => out.push_str("current none\n"),
        }
        match &self.snapshot {
            Some(s) => write_sparse(&mut out, "snapshot", s),
            None => out.push_str("snapshot none\n"),
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| -> Result<(usize, String)> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l.to_string()))
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    msg: format!("unexpected end of checkpoint, wanted {expect}"),
                })
        };
        let parse_err = |line: usize, msg: String| Error::Parse { line, msg };

        let (ln, header) = next("header")?;
        if header.trim() != "SSGP v1" {
            return Err(parse_err(ln, format!("bad header {header:?}")));
        }
        let (ln, total_line) = next("total_observed")?;
        let total_observed: usize = total_line
            .strip_prefix("total_observed ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| parse_err(ln, "expected `total_observed <n>`".into()))?;
        let (ln, config_line) = next("config")?;
        let cfg_parts: Vec<&str> = config_line
            .strip_prefix("config ")
            .map(|v| v.split_whitespace().collect())
            .ok_or_else(|| parse_err(ln, "expected `config <fraction> <cap>`".into()))?;
        if cfg_parts.len() != 2 {
            return Err(parse_err(ln, "config needs fraction and cap".into()));
        }
        let config = StreamingConfig {
            inducing_fraction: cfg_parts[0]
                .parse()
                .map_err(|_| parse_err(ln, "bad inducing fraction".into()))?,
            inducing_cap: cfg_parts[1]
                .parse()
                .map_err(|_| parse_err(ln, "bad inducing cap".into()))?,
        };

        let parse_hyper = |ln: usize, line: &str| -> Result<Hyperparameters> {
            let parts: Vec<&str> = line
                .strip_prefix("hyper ")
                .map(|v| v.split_whitespace().collect())
                .ok_or_else(|| parse_err(ln, "expected `hyper <l> <s> <n>`".into()))?;
            if parts.len() != 3 {
                return Err(parse_err(ln, "hyper needs three log values".into()));
            }
            let vals: Vec<f64> = parts
                .iter()
                .map(|p| p.parse().map_err(|_| parse_err(ln, format!("bad float {p:?}"))))
                .collect::<Result<_>>()?;
            Hyperparameters::from_log(vals[0], vals[1], vals[2])
        };

        let (ln, hyper_line) = next("hyper")?;
        let hyper = parse_hyper(ln, &hyper_line)?;

        let mut read_sparse = |tag: &str| -> Result<Option<SparseGPState>> {
            let (ln, head) = next(tag)?;
            if head.trim() == format!("{tag} none") {
                return Ok(None);
            }
            let m: usize = head
                .strip_prefix(&format!("{tag} "))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| parse_err(ln, format!("expected `{tag} <m>` or `{tag} none`")))?;
            let mut points = Vec::with_capacity(m);
            for _ in 0..m {
                let (ln, line) = next("inducing point")?;
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(parse_err(ln, "inducing point needs `x y`".into()));
                }
                let x: f64 =
                    parts[0].parse().map_err(|_| parse_err(ln, "bad x coordinate".into()))?;
                let y: f64 =
                    parts[1].parse().map_err(|_| parse_err(ln, "bad y coordinate".into()))?;
                points.push(Point::new(x, y));
            }
            let (ln, mean_line) = next("q mean")?;
            let mean_vals: Vec<f64> = mean_line
                .split_whitespace()
                .map(|p| p.parse().map_err(|_| parse_err(ln, format!("bad float {p:?}"))))
                .collect::<Result<_>>()?;
            if mean_vals.len() != m {
                return Err(parse_err(ln, format!("q mean has {} values, want {m}", mean_vals.len())));
            }
            let mut cov = DMatrix::zeros(m, m);
            for i in 0..m {
                let (ln, row_line) = next("q covariance row")?;
                let row: Vec<f64> = row_line
                    .split_whitespace()
                    .map(|p| p.parse().map_err(|_| parse_err(ln, format!("bad float {p:?}"))))
                    .collect::<Result<_>>()?;
                if row.len() != m {
                    return Err(parse_err(ln, format!("covariance row {i} has {} values, want {m}", row.len())));
                }
                for j in 0..m {
                    cov[(i, j)] = row[j];
                }
            }
            let (ln, hyper_line) = next("state hyper")?;
            let state_hyper = parse_hyper(ln, &hyper_line)?;
            let variational = VariationalState::new(DVector::from_vec(mean_vals), cov)?;
            Ok(Some(SparseGPState::new(InducingSet::new(points)?, variational, state_hyper)?))
        };

        let current = read_sparse("current")?;
        let snapshot = read_sparse("snapshot")?;

        Ok(Self {
            current,
            snapshot,
            hyper,
            total_observed,
            config,
            last_update: UpdateEvent::NeverUpdated,
        })
    }
}


impl crate::data::MapPosterior for StreamingGPState {
    fn predict_at(&self, points: &[Point]) -> Vec<PosteriorPrediction> {
        self.predict(points)
    }
}
