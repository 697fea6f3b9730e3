//! Mission orchestration: sensing at a fixed rate, batched map updates
//! every update period, on-the-fly replanning for our planner, and the
//! receding-horizon and random baselines. Produces a complete time-indexed
//! log with RMSE/entropy metrics on a fixed evaluation grid.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaChaRng;

use crate::data::{DataBatch, MapPosterior, PosteriorPrediction};
use crate::error::{Error, Result};
use crate::exact::{fit_exact, initial_hyperparameters, ExactGPState};
use crate::kernel::Hyperparameters;
use crate::optim::OptimizerConfig;
use crate::planner::{entropy, replan, PlannerConfig, ReplanOutcome};
use crate::sparse::{fit_sgpr, svgp_elbo, InducingSet, SparseGPState, VariationalState};
use crate::streaming::{StreamingConfig, StreamingGPState, UpdateEvent};
use crate::vehicle::{los_heading, path_progress, step, Path, VehicleState};
use crate::world::{sense, segment_collides, Bounds, Measurement, ObstacleMap, ScalarField};
use crate::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlannerChoice {
    Ours,
    RigRecedingHorizon,
    Random,
}

impl PlannerChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Self::Ours),
            "rig" | "rig_receding_horizon" => Ok(Self::RigRecedingHorizon),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!(
                "unknown planner {other:?} (expected ours | rig | random)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ours => "ours",
            Self::RigRecedingHorizon => "rig",
            Self::Random => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapperChoice {
    Exact,
    Sgpr,
    Svgp,
    Ssgp,
}

impl MapperChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "sgpr" => Ok(Self::Sgpr),
            "svgp" => Ok(Self::Svgp),
            "ssgp" => Ok(Self::Ssgp),
            other => Err(Error::Config(format!(
                "unknown mapper {other:?} (expected exact | sgpr | svgp | ssgp)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Sgpr => "sgpr",
            Self::Svgp => "svgp",
            Self::Ssgp => "ssgp",
        }
    }
}

#[derive(Clone, Debug)]
pub struct MissionConfig {
    /// Mission budget B in seconds.
    pub budget_s: f64,
    /// Map update period t_u in seconds.
    pub update_period_s: f64,
    pub sensor_hz: f64,
    pub planner: PlannerChoice,
    pub mapper: MapperChoice,
    /// Fraction of the current path traversed before a replan launches.
    pub replan_trigger: f64,
    pub seed: u64,
    /// Deterministic mode charges fixed simulated costs instead of
    /// measured wall time, so logs are bit-reproducible.
    pub deterministic: bool,
    pub planner_config: PlannerConfig,
    pub metric_grid: (usize, usize),
    pub surge_speed: f64,
    pub turn_rate_limit: f64,
    pub lookahead: f64,
    pub sensor_noise_std: f64,
    pub start: Point,
    pub streaming: StreamingConfig,
    pub optimizer: OptimizerConfig,
    /// Simulated planning pause charged to the receding-horizon baseline in
    /// deterministic mode (it stops to plan; we do not).
    pub rig_plan_charge_s: f64,
    /// Bootstrap path length as a fraction of budget * speed.
    pub bootstrap_fraction: f64,
    /// Iteration cap per periodic refit of the retraining mappers.
    pub mapper_refit_iters: usize,
    /// When set, every replan tree is dumped as text into this directory.
    pub dump_trees_dir: Option<PathBuf>,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            budget_s: 600.0,
            update_period_s: 10.0,
            sensor_hz: 5.0,
            planner: PlannerChoice::Ours,
            mapper: MapperChoice::Ssgp,
            replan_trigger: 0.7,
            seed: 1,
            deterministic: true,
            planner_config: PlannerConfig::default(),
            metric_grid: (100, 100),
            surge_speed: 1.0,
            turn_rate_limit: 0.5,
            lookahead: 5.0,
            sensor_noise_std: 0.02,
            start: Point::new(0.0, 0.0),
            streaming: StreamingConfig::default(),
            optimizer: OptimizerConfig::default(),
            rig_plan_charge_s: 2.0,
            bootstrap_fraction: 0.05,
            mapper_refit_iters: 15,
            dump_trees_dir: None,
        }
    }
}

impl MissionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget_s < 0.0 || !self.budget_s.is_finite() {
            return Err(Error::Config(format!("budget {} must be >= 0", self.budget_s)));
        }
        if !(self.update_period_s > 0.0) {
            return Err(Error::Config("update period must be positive".into()));
        }
        if !(self.sensor_hz > 0.0) {
            return Err(Error::Config("sensor rate must be positive".into()));
        }
        if !(self.replan_trigger > 0.0 && self.replan_trigger <= 1.0) {
            return Err(Error::Config(format!(
                "replan trigger {} must lie in (0, 1]",
                self.replan_trigger
            )));
        }
        if !(self.surge_speed > 0.0) {
            return Err(Error::Config("surge speed must be positive".into()));
        }
        self.planner_config.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoseSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct MetricSample {
    pub t: f64,
    pub rmse: f64,
    pub mean_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct MissionEvent {
    pub t: f64,
    pub kind: String,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct TimingSample {
    pub t: f64,
    pub component: String,
    pub seconds: f64,
}

/// Complete record of one mission.
#[derive(Clone, Debug, Default)]
pub struct MissionLog {
    pub poses: Vec<PoseSample>,
    pub measurements: Vec<Measurement>,
    pub metrics: Vec<MetricSample>,
    pub events: Vec<MissionEvent>,
    pub timings: Vec<TimingSample>,
    pub total_path_length: f64,
    /// Cumulative GP training cost: the fixed cost model in deterministic
    /// mode, measured wall time otherwise.
    pub gp_compute_seconds: f64,
    pub planning_seconds: f64,
}

impl MissionLog {
    pub fn final_metrics(&self) -> Option<&MetricSample> {
        self.metrics.last()
    }

    fn event(&mut self, t: f64, kind: &str, detail: String) {
        self.events.push(MissionEvent { t, kind: kind.to_string(), detail });
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("t,rmse,entropy\n");
        for m in &self.metrics {
            out.push_str(&format!("{},{},{}\n", m.t, m.rmse, m.mean_entropy));
        }
        out
    }

    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("t,x,y,heading\n");
        for p in &self.poses {
            out.push_str(&format!("{},{},{},{}\n", p.t, p.x, p.y, p.heading));
        }
        out
    }

    pub fn events_csv(&self) -> String {
        let mut out = String::from("t,kind,detail\n");
        for e in &self.events {
            out.push_str(&format!("{},{},{}\n", e.t, e.kind, e.detail.replace(',', ";")));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("t,component,wall_seconds\n");
        for s in &self.timings {
            out.push_str(&format!("{},{},{}\n", s.t, s.component, s.seconds));
        }
        out
    }
}

/// Posterior view over whichever backend the mission is running.
pub enum PosteriorView<'a> {
    Prior(f64),
    Exact(&'a ExactGPState),
    Sparse(&'a SparseGPState),
    Streaming(&'a StreamingGPState),
}

impl MapPosterior for PosteriorView<'_> {
    fn predict_at(&self, points: &[Point]) -> Vec<PosteriorPrediction> {
        match self {
            PosteriorView::Prior(sf2) => points
                .iter()
                .map(|_| PosteriorPrediction { mean: 0.0, variance: *sf2 })
                .collect(),
            PosteriorView::Exact(s) => s.predict(points),
            PosteriorView::Sparse(s) => s.predict(points),
            PosteriorView::Streaming(s) => s.predict(points),
        }
    }
}

/// Map-learning backend driven by the mission loop. The retraining
/// backends accumulate every measurement; the streaming backend keeps none.
pub enum Mapper {
    Exact { data: (Vec<Point>, Vec<f64>), state: Option<ExactGPState>, warm: Hyperparameters },
    Sgpr { data: (Vec<Point>, Vec<f64>), state: Option<SparseGPState>, warm: Hyperparameters },
    Svgp { data: (Vec<Point>, Vec<f64>), state: Option<SparseGPState>, warm: Hyperparameters },
    Ssgp(StreamingGPState),
}

pub struct IngestOutcome {
    pub applied: bool,
    pub detail: String,
    pub inducing: usize,
    /// Simulated seconds charged by the deterministic cost model.
    pub charge_s: f64,
}

impl Mapper {
    pub fn new(choice: MapperChoice, init: Hyperparameters, streaming: StreamingConfig) -> Self {
        match choice {
            MapperChoice::Exact => {
                Mapper::Exact { data: (Vec::new(), Vec::new()), state: None, warm: init }
            }
            MapperChoice::Sgpr => {
                Mapper::Sgpr { data: (Vec::new(), Vec::new()), state: None, warm: init }
            }
            MapperChoice::Svgp => {
                Mapper::Svgp { data: (Vec::new(), Vec::new()), state: None, warm: init }
            }
            MapperChoice::Ssgp => Mapper::Ssgp(StreamingGPState::new(init, streaming)),
        }
    }

    pub fn posterior(&self) -> PosteriorView<'_> {
        match self {
            Mapper::Exact { state: Some(s), .. } => PosteriorView::Exact(s),
            Mapper::Exact { warm, .. } => PosteriorView::Prior(warm.signal_variance()),
            Mapper::Sgpr { state: Some(s), .. } | Mapper::Svgp { state: Some(s), .. } => {
                PosteriorView::Sparse(s)
            }
            Mapper::Sgpr { warm, .. } | Mapper::Svgp { warm, .. } => {
                PosteriorView::Prior(warm.signal_variance())
            }
            Mapper::Ssgp(s) => PosteriorView::Streaming(s),
        }
    }

    pub fn retained_raw_points(&self) -> usize {
        match self {
            Mapper::Exact { data, .. } | Mapper::Sgpr { data, .. } | Mapper::Svgp { data, .. } => {
                data.0.len()
            }
            Mapper::Ssgp(s) => s.retained_raw_measurements(),
        }
    }

    pub fn inducing_count(&self) -> usize {
        match self {
            Mapper::Exact { .. } => 0,
            Mapper::Sgpr { state, .. } | Mapper::Svgp { state, .. } => {
                state.as_ref().map_or(0, |s| s.inducing().len())
            }
            Mapper::Ssgp(s) => s.inducing_count(),
        }
    }

    pub fn total_observed(&self) -> usize {
        match self {
            Mapper::Exact { data, .. } | Mapper::Sgpr { data, .. } | Mapper::Svgp { data, .. } => {
                data.0.len()
            }
            Mapper::Ssgp(s) => s.total_observed(),
        }
    }

    pub fn streaming_state(&self) -> Option<&StreamingGPState> {
        match self {
            Mapper::Ssgp(s) => Some(s),
            _ => None,
        }
    }

    /// Consume one batch of measurements.
    pub fn ingest(
        &mut self,
        batch: &DataBatch,
        opt: &OptimizerConfig,
        streaming_cfg: &StreamingConfig,
        refit_iters: usize,
    ) -> IngestOutcome {
        match self {
            Mapper::Ssgp(state) => {
                let b = batch.len() as f64;
                let next = state.updated(batch, opt);
                let (applied, detail) = match next.last_update() {
                    UpdateEvent::Applied { inducing, bound, .. } => {
                        (true, format!("m={inducing} bound={bound:.3}"))
                    }
                    UpdateEvent::Skipped { reason } => (false, format!("skipped: {reason}")),
                    UpdateEvent::NeverUpdated => (false, "skipped: empty".into()),
                };
                let m = next.inducing_count() as f64;
                *state = next;
                IngestOutcome {
                    applied,
                    detail,
                    inducing: m as usize,
                    charge_s: 1e-9 * (opt.streaming_steps as f64) * (b * m * m + m * m * m),
                }
            }
            Mapper::Exact { data, state, warm } => {
                data.0.extend_from_slice(batch.points());
                data.1.extend_from_slice(batch.values());
                let all = DataBatch::new(data.0.clone(), data.1.clone())
                    .expect("accumulated data is finite");
                let opt_refit = OptimizerConfig { max_iters: refit_iters, ..*opt };
                match fit_exact(&all, *warm, &opt_refit) {
                    Ok((s, report)) => {
                        *warm = *s.hyperparameters();
                        *state = Some(s);
                        let n = data.0.len() as f64;
                        IngestOutcome {
                            applied: true,
                            detail: format!("n={} iters={}", data.0.len(), report.iterations),
                            inducing: 0,
                            charge_s: 1e-9 * (report.iterations.max(1) as f64) * n * n * n,
                        }
                    }
                    Err(e) => IngestOutcome {
                        applied: false,
                        detail: format!("skipped: {e}"),
                        inducing: 0,
                        charge_s: 0.0,
                    },
                }
            }
            Mapper::Sgpr { data, state, warm } => {
                data.0.extend_from_slice(batch.points());
                data.1.extend_from_slice(batch.values());
                let all = DataBatch::new(data.0.clone(), data.1.clone())
                    .expect("accumulated data is finite");
                let n = data.0.len();
                let m = ((streaming_cfg.inducing_fraction * n as f64).ceil() as usize)
                    .clamp(1, streaming_cfg.inducing_cap)
                    .min(n);
                let opt_refit = OptimizerConfig { max_iters: refit_iters, ..*opt };
                match fit_sgpr(&all, m, *warm, &opt_refit) {
                    Ok((s, report)) => {
                        *warm = *s.hyperparameters();
                        *state = Some(s);
                        IngestOutcome {
                            applied: true,
                            detail: format!("n={n} m={m} iters={}", report.iterations),
                            inducing: m,
                            charge_s: 1e-9
                                * (report.iterations.max(1) as f64)
                                * (n as f64)
                                * (m as f64)
                                * (m as f64),
                        }
                    }
                    Err(e) => IngestOutcome {
                        applied: false,
                        detail: format!("skipped: {e}"),
                        inducing: self.inducing_count(),
                        charge_s: 0.0,
                    },
                }
            }
            Mapper::Svgp { data, state, warm } => {
                data.0.extend_from_slice(batch.points());
                data.1.extend_from_slice(batch.values());
                match svgp_refit(data, state, warm, opt, streaming_cfg) {
                    Ok((m, bound)) => {
                        let n = data.0.len() as f64;
                        IngestOutcome {
                            applied: true,
                            detail: format!("n={} m={m} bound={bound:.3}", data.0.len()),
                            inducing: m,
                            charge_s: 1e-9
                                * (opt.streaming_steps as f64)
                                * ((opt.minibatch as f64) * (m as f64).powi(2)
                                    + (m as f64).powi(3))
                                .max(n),
                        }
                    }
                    Err(e) => IngestOutcome {
                        applied: false,
                        detail: format!("skipped: {e}"),
                        inducing: self.inducing_count(),
                        charge_s: 0.0,
                    },
                }
            }
        }
    }
}

/// Minibatch refit of the accumulating SVGP baseline: reselect inducing
/// inputs, then ascend the fresh-batch bound over shuffled minibatches of
/// the full dataset, warm-started from the previous posterior.
fn svgp_refit(
    data: &(Vec<Point>, Vec<f64>),
    state: &mut Option<SparseGPState>,
    warm: &mut Hyperparameters,
    opt: &OptimizerConfig,
    streaming_cfg: &StreamingConfig,
) -> Result<(usize, f64)> {
    use crate::elbo::{marginal_at, optimize_bound, BoundWorkspace, VariationalParams};
    use crate::kernel::{pivoted_cholesky_select, rbf_matrix};
    use nalgebra::DVector;

    let n = data.0.len();
    let m = ((streaming_cfg.inducing_fraction * n as f64).ceil() as usize)
        .clamp(1, streaming_cfg.inducing_cap)
        .min(n);
    let picked = pivoted_cholesky_select(&data.0, m, warm)?;
    let z: Vec<Point> = picked.iter().map(|&i| data.0[i]).collect();

    let mut q = match state.as_ref() {
        Some(prev) => {
            let (mean, cov) = marginal_at(
                prev.inducing().points(),
                prev.variational().mean(),
                prev.variational().cov(),
                prev.hyperparameters(),
                &z,
            )?;
            VariationalParams::from_moments(mean, &cov)?
        }
        None => {
            let kzz = rbf_matrix(&z, &z, warm);
            VariationalParams::from_moments(DVector::zeros(m), &kzz)?
        }
    };
    let mut hyper = *warm;
    let mut value = f64::NEG_INFINITY;

    // A few deterministic strided minibatch rounds over the dataset.
    let b = opt.minibatch.min(n).max(1);
    let rounds = 4;
    let steps_per_round = (opt.streaming_steps / rounds).max(1);
    for round in 0..rounds {
        let mut pts = Vec::with_capacity(b);
        let mut vals = Vec::with_capacity(b);
        let mut idx = round;
        while pts.len() < b {
            pts.push(data.0[idx % n]);
            vals.push(data.1[idx % n]);
            idx += rounds.max(1);
        }
        let ws = BoundWorkspace::new(&z, &pts, &vals, n as f64 / b as f64, None);
        let round_opt = OptimizerConfig { streaming_steps: steps_per_round, ..*opt };
        let fit = optimize_bound(&ws, hyper, q, &round_opt)?;
        hyper = fit.hyper;
        q = fit.q;
        value = fit.value;
    }

    let variational = VariationalState::new(q.mean.clone(), q.covariance())?;
    *warm = hyper;
    *state = Some(SparseGPState::new(InducingSet::new(z)?, variational, hyper)?);
    Ok((m, value))
}

/// RMSE of the posterior mean against ground truth and the mean posterior
/// entropy, both over the cell centers of a regular grid, skipping cells
/// inside obstacles.
pub fn compute_metrics(
    posterior: &dyn MapPosterior,
    field: &ScalarField,
    obstacles: &ObstacleMap,
    grid: (usize, usize),
) -> (f64, f64) {
    let b = field.bounds();
    let (gx, gy) = grid;
    let mut cells = Vec::with_capacity(gx * gy);
    for iy in 0..gy {
        for ix in 0..gx {
            let p = Point::new(
                b.xmin + b.width() * (ix as f64 + 0.5) / gx as f64,
                b.ymin + b.height() * (iy as f64 + 0.5) / gy as f64,
            );
            if !obstacles.contains(p, 0.0) {
                cells.push(p);
            }
        }
    }
    let mut sq_sum = 0.0;
    let mut ent_sum = 0.0;
    // Chunked so the exact backend never materializes an n x 10^4 block.
    for chunk in cells.chunks(512) {
        let preds = posterior.predict_at(chunk);
        for (p, pred) in chunk.iter().zip(&preds) {
            let truth = field.value_at(*p).expect("cell centers are inside the field");
            sq_sum += (pred.mean - truth) * (pred.mean - truth);
            ent_sum += entropy(pred);
        }
    }
    let n = cells.len() as f64;
    ((sq_sum / n).sqrt(), ent_sum / n)
}

/// Random collision-free waypoint path from `root`: isotropic random legs,
/// truncated so the total length lands in [max_len/2, max_len].
pub fn random_plan<R: Rng>(
    root: Point,
    obstacles: &ObstacleMap,
    bounds: &Bounds,
    max_len: f64,
    inflation: f64,
    rng: &mut R,
) -> Result<Path> {
    let sample_bounds = bounds.inset(inflation.min(bounds.width() / 4.0));
    let mut waypoints = vec![root];
    let mut total = 0.0;
    let mut rejections = 0;
    // Legs short enough to wander, long enough to escape a corner start
    // that sits outside the inset sampling region.
    let min_leg = 2.2 * inflation.max(1.0);
    while total < max_len / 2.0 {
        let angle = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let mut leg = (rng.gen_range(0.2..0.6) * max_len).max(min_leg);
        if total + leg > max_len {
            leg = max_len - total;
        }
        let cur = *waypoints.last().unwrap();
        let next = Point::new(cur.x + leg * angle.cos(), cur.y + leg * angle.sin());
        if !sample_bounds.contains(next) || segment_collides(cur, next, obstacles, inflation) {
            rejections += 1;
            if rejections > 200 {
                return Err(Error::Planner(format!(
                    "random planner rejected 200 segments from ({}, {})",
                    root.x, root.y
                )));
            }
            continue;
        }
        waypoints.push(next);
        total += leg;
    }
    Path::new(waypoints)
}

/// Receding-horizon baseline: an information-weighted random tree (no
/// entropy-target bias) whose best branch within the horizon is driven to
/// completion while the vehicle stands still during planning.
pub fn rig_receding_horizon_plan<R: Rng>(
    posterior: &dyn MapPosterior,
    root: Point,
    obstacles: &ObstacleMap,
    bounds: &Bounds,
    config: &PlannerConfig,
    rng: &mut R,
) -> Result<ReplanOutcome> {
    let rig_config = PlannerConfig { epsilon: 0.0, ..*config };
    replan(root, posterior, obstacles, bounds, &rig_config, rng)
}

fn stream_rng(seed: u64, tag: u64) -> ChaChaRng {
    ChaChaRng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(tag))
}

struct PendingBatch {
    points: Vec<Point>,
    values: Vec<f64>,
}

impl PendingBatch {
    fn new() -> Self {
        Self { points: Vec::new(), values: Vec::new() }
    }

    fn push(&mut self, m: &Measurement) {
        self.points.push(m.position);
        self.values.push(m.value);
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn take(&mut self) -> DataBatch {
        let points = std::mem::take(&mut self.points);
        let values = std::mem::take(&mut self.values);
        DataBatch::new(points, values).expect("sensed data is finite")
    }
}

/// Run one complete mission and return its log. Planner failures keep the
/// current path and mapper failures skip the update; the loop never aborts.
pub fn run_mission(
    config: &MissionConfig,
    field: &ScalarField,
    obstacles: &ObstacleMap,
) -> Result<MissionLog> {
    config.validate()?;
    let bounds = *field.bounds();
    if !bounds.contains(config.start) {
        return Err(Error::Config("start position outside the field".into()));
    }
    if obstacles.contains(config.start, config.planner_config.inflation) {
        return Err(Error::Config("start position collides with an obstacle".into()));
    }

    let mut log = MissionLog::default();
    if config.budget_s == 0.0 {
        return Ok(log);
    }

    let dt = 1.0 / config.sensor_hz;
    let mut sensor_rng = stream_rng(config.seed, 0x53454e53);
    let mut planner_rng = stream_rng(config.seed, 0x504c414e);

    // Bootstrap path for the initial dataset.
    let bootstrap_len =
        (config.bootstrap_fraction * config.budget_s * config.surge_speed).max(12.0);
    let mut current_path = random_plan(
        config.start,
        obstacles,
        &bounds,
        bootstrap_len,
        config.planner_config.inflation,
        &mut planner_rng,
    )?;
    log.event(0.0, "bootstrap", format!("length={:.2}", current_path.total_length()));

    let first_wp = if current_path.waypoints().len() > 1 {
        current_path.waypoints()[1]
    } else {
        current_path.last()
    };
    let init_heading = (first_wp.y - config.start.y).atan2(first_wp.x - config.start.x);
    let mut vehicle = VehicleState::new(config.start, init_heading, config.surge_speed)?;
    log.poses.push(PoseSample { t: 0.0, x: vehicle.position.x, y: vehicle.position.y, heading: vehicle.heading });

    // The mapper is created lazily at bootstrap completion so its initial
    // hyperparameters can be scale-aware.
    let mut mapper: Option<Mapper> = None;
    let mut pending = PendingBatch::new();
    let mut t = 0.0;
    let mut next_update_t = f64::INFINITY;
    let mut pause_remaining = 0.0;
    let mut pending_path: Option<Path> = None;
    let mut replan_retry_t = 0.0;
    let mut replans = 0usize;

    let dump_tree = |log: &mut MissionLog, out: &ReplanOutcome, t: f64, n: usize| {
        if let Some(dir) = &config.dump_trees_dir {
            let _ = std::fs::create_dir_all(dir);
            let _ = std::fs::write(dir.join(format!("tree_{n:04}.txt")), out.tree.dump_text());
            log.event(t, "tree_dump", format!("tree_{n:04}.txt"));
        }
    };

    while t < config.budget_s - 1e-9 {
        t += dt;
        let paused = pause_remaining > 0.0;

        if paused {
            pause_remaining -= dt;
            log.poses.push(PoseSample {
                t,
                x: vehicle.position.x,
                y: vehicle.position.y,
                heading: vehicle.heading,
            });
            if pause_remaining <= 1e-9 {
                pause_remaining = 0.0;
                if let Some(path) = pending_path.take() {
                    current_path = path;
                }
            }
        } else {
            let cmd = los_heading(&vehicle, &current_path, config.lookahead);
            let prev = vehicle.position;
            vehicle = step(&vehicle, cmd, dt, config.turn_rate_limit);
            if !bounds.contains(vehicle.position) {
                // Planner margins should prevent this; clamp as a guard.
                vehicle.position = bounds.clamp(vehicle.position);
                log.event(t, "boundary_clamp", String::new());
            }
            log.total_path_length += (vehicle.position - prev).norm();
            log.poses.push(PoseSample {
                t,
                x: vehicle.position.x,
                y: vehicle.position.y,
                heading: vehicle.heading,
            });

            let m = sense(field, vehicle.position, t, config.sensor_noise_std, &mut sensor_rng)?;
            pending.push(&m);
            log.measurements.push(m);
        }

        // Bootstrap completion initializes the mapper (update first, then
        // planning may start).
        if mapper.is_none() {
            let (_, frac) = path_progress(&vehicle, &current_path);
            if frac >= 1.0 - 1e-9 && pending.len() >= 2 {
                let batch = pending.take();
                let init = initial_hyperparameters(
                    &DataBatch::new(batch.points().to_vec(), batch.values().to_vec())?,
                    bounds.diagonal(),
                );
                let mut m = Mapper::new(config.mapper, init, config.streaming);
                let wall = Instant::now();
                let outcome = m.ingest(&batch, &config.optimizer, &config.streaming, config.mapper_refit_iters);
                let spent = if config.deterministic {
                    outcome.charge_s
                } else {
                    wall.elapsed().as_secs_f64()
                };
                log.gp_compute_seconds += spent;
                log.timings.push(TimingSample { t, component: "map_update".into(), seconds: spent });
                log.event(t, "map_init", format!("batch={} {}", batch.len(), outcome.detail));
                let (rmse, ent) =
                    compute_metrics(&m.posterior(), field, obstacles, config.metric_grid);
                log.metrics.push(MetricSample { t, rmse, mean_entropy: ent });
                mapper = Some(m);
                next_update_t = t + config.update_period_s;
            }
        } else if t + 1e-9 >= next_update_t {
            let mapper = mapper.as_mut().unwrap();
            if pending.len() > 0 {
                let batch = pending.take();
                let wall = Instant::now();
                let outcome = mapper.ingest(&batch, &config.optimizer, &config.streaming, config.mapper_refit_iters);
                let spent = if config.deterministic {
                    outcome.charge_s
                } else {
                    wall.elapsed().as_secs_f64()
                };
                log.gp_compute_seconds += spent;
                log.timings.push(TimingSample { t, component: "map_update".into(), seconds: spent });
                let kind = if outcome.applied { "map_update" } else { "map_update_skipped" };
                log.event(t, kind, format!("batch={} {}", batch.len(), outcome.detail));
                let (rmse, ent) =
                    compute_metrics(&mapper.posterior(), field, obstacles, config.metric_grid);
                log.metrics.push(MetricSample { t, rmse, mean_entropy: ent });
            }
            next_update_t += config.update_period_s;
        }

        // Planning.
        if let Some(mapper_ref) = mapper.as_ref() {
            if !(pause_remaining > 0.0) && t >= replan_retry_t {
                let (_, frac) = path_progress(&vehicle, &current_path);
                match config.planner {
                    PlannerChoice::Ours => {
                        if frac >= config.replan_trigger {
                            let root = current_path.last();
                            let wall = Instant::now();
                            let result = replan(
                                root,
                                &mapper_ref.posterior(),
                                obstacles,
                                &bounds,
                                &config.planner_config,
                                &mut planner_rng,
                            );
                            let spent = if config.deterministic {
                                0.0
                            } else {
                                wall.elapsed().as_secs_f64()
                            };
                            log.planning_seconds += spent;
                            log.timings.push(TimingSample { t, component: "replan".into(), seconds: spent });
                            match result {
                                Ok(out) => {
                                    replans += 1;
                                    log.event(
                                        t,
                                        "replan",
                                        format!(
                                            "len={:.2} nodes={} target=({:.1} {:.1})",
                                            out.path.total_length(),
                                            out.tree.len(),
                                            out.entropy_target.x,
                                            out.entropy_target.y
                                        ),
                                    );
                                    dump_tree(&mut log, &out, t, replans);
                                    current_path.extend_with(&out.path);
                                }
                                Err(e) => {
                                    log.event(t, "planner_failure", e.to_string());
                                    replan_retry_t = t + 1.0;
                                }
                            }
                        }
                    }
                    PlannerChoice::Random => {
                        if frac >= 1.0 - 1e-9 {
                            let result = random_plan(
                                vehicle.position,
                                obstacles,
                                &bounds,
                                config.planner_config.selection_radius,
                                config.planner_config.inflation,
                                &mut planner_rng,
                            );
                            match result {
                                Ok(path) => {
                                    log.event(t, "replan", format!("len={:.2}", path.total_length()));
                                    current_path = path;
                                }
                                Err(e) => {
                                    log.event(t, "planner_failure", e.to_string());
                                    replan_retry_t = t + 1.0;
                                }
                            }
                        }
                    }
                    PlannerChoice::RigRecedingHorizon => {
                        if frac >= 1.0 - 1e-9 {
                            let wall = Instant::now();
                            let result = rig_receding_horizon_plan(
                                &mapper_ref.posterior(),
                                vehicle.position,
                                obstacles,
                                &bounds,
                                &config.planner_config,
                                &mut planner_rng,
                            );
                            let spent = wall.elapsed().as_secs_f64();
                            let charge = if config.deterministic {
                                config.rig_plan_charge_s
                            } else {
                                spent
                            };
                            log.planning_seconds += charge;
                            log.timings.push(TimingSample { t, component: "replan_pause".into(), seconds: charge });
                            match result {
                                Ok(out) => {
                                    replans += 1;
                                    log.event(
                                        t,
                                        "replan_pause",
                                        format!("len={:.2} pause={charge:.2}", out.path.total_length()),
                                    );
                                    dump_tree(&mut log, &out, t, replans);
                                    pending_path = Some(out.path);
                                    pause_remaining = charge;
                                }
                                Err(e) => {
                                    log.event(t, "planner_failure", e.to_string());
                                    replan_retry_t = t + 1.0;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // Final metric sample for whatever state the map ended in.
    if let Some(mapper) = mapper.as_ref() {
        let should_sample = log.metrics.last().map_or(true, |m| m.t < t - 1e-9);
        if should_sample {
            let (rmse, ent) =
                compute_metrics(&mapper.posterior(), field, obstacles, config.metric_grid);
            log.metrics.push(MetricSample { t, rmse, mean_entropy: ent });
        }
    }
    Ok(log)
}

/// The obstacle layout used by the synthetic experiments: a few blocks and
/// circles well away from the origin start corner.
pub fn default_obstacle_layout(bounds: &Bounds) -> ObstacleMap {
    use crate::world::Obstacle;
    let w = bounds.width() / 100.0;
    let h = bounds.height() / 100.0;
    ObstacleMap::new(
        vec![
            Obstacle::Rect {
                x0: bounds.xmin + 30.0 * w,
                y0: bounds.ymin + 42.0 * h,
                x1: bounds.xmin + 44.0 * w,
                y1: bounds.ymin + 58.0 * h,
            },
            Obstacle::Rect {
                x0: bounds.xmin + 62.0 * w,
                y0: bounds.ymin + 70.0 * h,
                x1: bounds.xmin + 78.0 * w,
                y1: bounds.ymin + 80.0 * h,
            },
            Obstacle::Circle {
                cx: bounds.xmin + 70.0 * w,
                cy: bounds.ymin + 30.0 * h,
                r: 7.0 * w,
            },
            Obstacle::Circle {
                cx: bounds.xmin + 25.0 * w,
                cy: bounds.ymin + 78.0 * h,
                r: 6.0 * w,
            },
        ],
        bounds,
    )
    .expect("default layout fits any valid bounds")
}
