//! Synthetic world for closed-loop runs.
//!
//! Everything lives in the road frame: `x` is arc length along the
//! centerline and `y` the signed lateral offset (left positive). The ego
//! follows the commanded samples exactly; the only stochastic element is the
//! planner's own seeded sampling, so episodes are reproducible.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cem::{
    initial_distribution, single_init_plan, straight_longitudinal, warm_start_mean, Candidate,
    Cem, CemConfig, MetaCostParams, PlanOutcome, SamplingDistribution, TrajectoryObjective,
};
use crate::error::{CemError, GeometryError, SimError};
use crate::frenet::{max_heading_deg, Centerline, FrenetPose, HEADING_WARN_DEG};
use crate::problem::{
    ellipse_violation, BoundaryState, CostWeights, FeatureAnchor, ObstacleTrack, ProblemSpec,
    DEFAULT_FEATURE_GATE,
};
use crate::solver::{BatchSolver, SolverSettings};
use crate::trajectory::{BasisSpec, TrajectoryCoeffs, TrajectorySamples};

/// Clearance added to each semi-axis of the planner's obstacle ellipses.
pub const PLANNING_MARGIN: f64 = 0.5;
/// Features must lie within this lateral band of the centerline (m).
pub const FEATURE_BAND: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CenterlineSpec {
    /// Straight road along the global x axis.
    Straight {
        length: f64,
    },
    /// Circular road starting at the origin heading along +x; positive
    /// radius turns left.
    Arc {
        radius: f64,
        length: f64,
    },
    Waypoints {
        points: Vec<[f64; 2]>,
    },
}

impl CenterlineSpec {
    pub fn build(&self) -> Result<Centerline, GeometryError> {
        match self {
            CenterlineSpec::Straight { length } => Centerline::straight([0.0, 0.0], 0.0, *length),
            CenterlineSpec::Arc { radius, length } => {
                let sweep = length / radius;
                let segments = ((length.abs() / 0.5).ceil() as usize).max(1);
                Centerline::arc(
                    [0.0, *radius],
                    radius.abs(),
                    -std::f64::consts::FRAC_PI_2 * radius.signum(),
                    sweep,
                    segments,
                )
            }
            CenterlineSpec::Waypoints { points } => Centerline::new(points.clone()),
        }
    }
}

/// Constant-velocity obstacle in the road frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Obstacle {
    pub fn at(&self, t: f64) -> [f64; 2] {
        [self.x + self.vx * t, self.y + self.vy * t]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub centerline: CenterlineSpec,
    /// Road width `y_d` (m).
    pub road_width: f64,
    pub run_length: f64,
    #[serde(default)]
    pub features: Vec<FeatureAnchor>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub v_des: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub kappa_max: f64,
    #[serde(default = "default_ego_half_length")]
    pub ego_half_length: f64,
    #[serde(default = "default_ego_half_width")]
    pub ego_half_width: f64,
    /// Initial lateral offset of the ego.
    #[serde(default)]
    pub start_y: f64,
}

fn default_ego_half_length() -> f64 {
    2.25
}

fn default_ego_half_width() -> f64 {
    1.0
}

impl Scene {
    /// Straight empty road with the default dynamics limits.
    pub fn straight(run_length: f64) -> Self {
        Self {
            centerline: CenterlineSpec::Straight {
                length: run_length + 200.0,
            },
            road_width: 7.0,
            run_length,
            features: Vec::new(),
            obstacles: Vec::new(),
            v_des: 10.0,
            v_max: 15.0,
            a_max: 5.0,
            kappa_max: 0.2,
            ego_half_length: default_ego_half_length(),
            ego_half_width: default_ego_half_width(),
            start_y: 0.0,
        }
    }

    pub fn validate(&self) -> Result<Centerline, SimError> {
        let bad = |m: String| Err(SimError::InvalidScene(m));
        if !(self.run_length > 0.0) {
            return bad("run_length must be > 0".into());
        }
        if !(self.road_width > 0.0) || !(self.kappa_max > 0.0) {
            return bad("road_width and kappa_max must be > 0".into());
        }
        if !(self.v_des > 0.0 && self.v_max >= self.v_des && self.a_max > 0.0) {
            return bad("need 0 < v_des <= v_max and a_max > 0".into());
        }
        if !(self.ego_half_length > 0.0 && self.ego_half_width > 0.0) {
            return bad("ego half-extents must be > 0".into());
        }
        for (i, f) in self.features.iter().enumerate() {
            if !(f.s.is_finite() && f.d.abs() <= FEATURE_BAND && f.weight >= 0.0) {
                return bad(format!(
                    "feature {i} outside the road band or with negative weight"
                ));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.half_length > 0.0 && o.half_width > 0.0)
                || ![o.x, o.y, o.vx, o.vy].iter().all(|v| v.is_finite())
            {
                return bad(format!("obstacle {i} is malformed"));
            }
        }
        let centerline = self.centerline.build()?;
        if centerline.length() < self.run_length {
            return bad(format!(
                "centerline length {:.1} is shorter than run_length {:.1}",
                centerline.length(),
                self.run_length
            ));
        }
        Ok(centerline)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
    pub ddx: f64,
    pub ddy: f64,
    pub t: f64,
}

impl EgoState {
    /// At the origin of the run, cruising at `v_des`.
    pub fn start(scene: &Scene) -> Self {
        Self {
            x: 0.0,
            y: scene.start_y,
            dx: scene.v_des,
            ..Default::default()
        }
    }

    fn boundary(&self) -> BoundaryState {
        BoundaryState {
            pos: [self.x, self.y],
            vel: [self.dx, self.dy],
            acc: [self.ddx, self.ddy],
        }
    }

    fn from_samples(s: &TrajectorySamples, k: usize, t: f64) -> Self {
        Self {
            x: s.x[k],
            y: s.y[k],
            dx: s.dx[k],
            dy: s.dy[k],
            ddx: s.ddx[k],
            ddy: s.ddy[k],
            t,
        }
    }
}

/// Feature-proximity drift proxy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftModel {
    pub delta_min: f64,
    pub delta_max: f64,
    pub kernel_sigma: f64,
    pub visibility_range: f64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            delta_min: 0.002,
            delta_max: 0.02,
            kernel_sigma: 2.0,
            visibility_range: 40.0,
        }
    }
}

impl DriftModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0 <= self.delta_min && self.delta_min < self.delta_max)
            || !(self.kernel_sigma > 0.0)
            || !(self.visibility_range >= 0.0)
        {
            return Err(SimError::InvalidScene(
                "drift model needs 0 <= delta_min < delta_max and sigma > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Feature richness seen from `(x, y)`, capped at 1.
pub fn richness(x: f64, y: f64, features: &[FeatureAnchor], model: &DriftModel) -> f64 {
    let two_s2 = 2.0 * model.kernel_sigma * model.kernel_sigma;
    let sum: f64 = features
        .iter()
        .filter(|f| f.s >= x && f.s <= x + model.visibility_range)
        .map(|f| f.weight * (-(y - f.d).powi(2) / two_s2).exp())
        .sum();
    sum.min(1.0)
}

/// Per-step drift: `delta_max` with nothing in view, down to `delta_min`
/// when the richness saturates.
pub fn drift_increment(ego: &EgoState, features: &[FeatureAnchor], model: &DriftModel) -> f64 {
    let rho = richness(ego.x, ego.y, features, model);
    model.delta_max - (model.delta_max - model.delta_min) * rho
}

/// Constant-velocity positions of every obstacle at `t0 + k dt`,
/// `k = 1..=steps`.
pub fn predict_obstacles(scene: &Scene, t0: f64, dt: f64, steps: usize) -> Vec<Vec<[f64; 2]>> {
    scene
        .obstacles
        .iter()
        .map(|o| (1..=steps).map(|k| o.at(t0 + k as f64 * dt)).collect())
        .collect()
}

/// Planner tracks aligned with the plan samples (`t0 + k dt`, `k = 0..n`),
/// with ellipses inflated by both footprints and the planning margin.
pub fn obstacle_tracks(scene: &Scene, t0: f64, basis: &BasisSpec) -> Vec<ObstacleTrack> {
    let n = basis.n_steps;
    let series = predict_obstacles(scene, t0 - basis.dt, basis.dt, n);
    scene
        .obstacles
        .iter()
        .zip(series)
        .map(|(o, s)| ObstacleTrack {
            xs: s.iter().map(|p| p[0]).collect(),
            ys: s.iter().map(|p| p[1]).collect(),
            a: o.half_length + scene.ego_half_length + PLANNING_MARGIN,
            b: o.half_width + scene.ego_half_width + PLANNING_MARGIN,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub cem: CemConfig,
    pub meta: MetaCostParams,
    pub solver: SolverSettings,
    pub weights: CostWeights,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            cem: CemConfig::default(),
            meta: MetaCostParams::default(),
            solver: SolverSettings::default(),
            weights: CostWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    CemMpc(PlannerConfig),
    /// Centerline following at `v_des`.
    Baseline,
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::CemMpc(_) => "cem-mpc",
            Controller::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub basis: BasisSpec,
    /// Steps executed from each plan before re-planning.
    pub replan_steps: usize,
    pub max_steps: usize,
    pub drift: DriftModel,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            basis: BasisSpec::default(),
            replan_steps: 10,
            max_steps: 100_000,
            drift: DriftModel::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub plan_id: usize,
    pub state: EgoState,
    pub drift_increment: f64,
    pub cumulative_drift: f64,
    /// Global-frame distance travelled during this step.
    pub path_length: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub step: usize,
    pub t: f64,
    pub obstacle: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub id: usize,
    pub t: f64,
    pub samples: TrajectorySamples,
    /// `None` for the baseline, which does not optimize.
    pub meta_cost: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimLog {
    pub rows: Vec<LogRow>,
    pub collisions: Vec<CollisionEvent>,
    pub plans: Vec<PlanRecord>,
    /// Set when a plan failed; the log up to that point is kept.
    pub failure: Option<String>,
    /// Wall-clock seconds per plan. Not part of the reproducible output.
    #[serde(skip)]
    pub plan_latency: Vec<f64>,
}

impl SimLog {
    pub fn collided(&self) -> bool {
        !self.collisions.is_empty()
    }

    /// CSV with one row per executed step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,dx,dy,drift_increment,cumulative_drift,plan_id\n");
        for r in &self.rows {
            let s = &r.state;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.t, s.x, s.y, s.dx, s.dy, r.drift_increment, r.cumulative_drift, r.plan_id
            ));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ape_proxy: f64,
    pub drl_ratio: f64,
    pub collisions: usize,
    pub steps: usize,
}

pub fn metrics(log: &SimLog, scene: &Scene) -> Result<Metrics, SimError> {
    if log.rows.is_empty() {
        return Err(SimError::EmptyLog);
    }
    let ape_proxy = log.rows.iter().map(|r| r.drift_increment).sum();
    let path: f64 = log.rows.iter().map(|r| r.path_length).sum();
    Ok(Metrics {
        ape_proxy,
        drl_ratio: path / scene.run_length,
        collisions: log.collisions.len(),
        steps: log.rows.len(),
    })
}

/// First obstacle whose footprint-sum ellipse contains the ego at time `t`.
fn collision_at(scene: &Scene, x: f64, y: f64, t: f64) -> Option<usize> {
    scene.obstacles.iter().position(|o| {
        let p = o.at(t);
        let a = o.half_length + scene.ego_half_length;
        let b = o.half_width + scene.ego_half_width;
        ellipse_violation(x - p[0], y - p[1], a, b) > 0.0
    })
}

fn global(centerline: &Centerline, x: f64, y: f64) -> Result<[f64; 2], GeometryError> {
    centerline.frenet_to_global(FrenetPose::new(x, y))
}

struct PlannerState {
    cem: Option<Cem>,
}

/// Closed-loop episode: plan, execute `replan_steps`, repeat until the ego
/// has covered `run_length`, collided, or `max_steps` ran out.
pub fn run_episode(
    scene: &Scene,
    controller: &Controller,
    cfg: &EpisodeConfig,
) -> Result<SimLog, SimError> {
    let centerline = scene.validate()?;
    cfg.drift.validate()?;
    cfg.basis.validate()?;
    if cfg.replan_steps == 0 {
        return Err(SimError::InvalidScene("replan_steps must be >= 1".into()));
    }
    let n = cfg.basis.n_steps;
    let dt = cfg.basis.dt;
    let per_plan = cfg.replan_steps.min(n - 1);
    let mut ego = EgoState::start(scene);
    let mut log = SimLog::default();
    let mut planner = PlannerState { cem: None };
    let mut cumulative = 0.0;
    let mut last_global = global(&centerline, ego.x, ego.y)?;
    let mut step = 0;
    'episode: while ego.x < scene.run_length && step < cfg.max_steps {
        let plan_id = log.plans.len();
        let started = Instant::now();
        let planned = plan_once(scene, controller, cfg, &ego, &mut planner);
        log.plan_latency.push(started.elapsed().as_secs_f64());
        let (samples, meta) = match planned {
            Ok(p) => p,
            Err(SimError::Planning(e @ CemError::PlanningFailure { .. })) => {
                log.failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let heading = max_heading_deg(&samples.dx, &samples.dy);
        if heading > HEADING_WARN_DEG {
            log::warn!("plan {plan_id}: heading {heading:.1} deg exceeds {HEADING_WARN_DEG} deg; ellipse footprint is approximate");
        }
        log.plans.push(PlanRecord {
            id: plan_id,
            t: ego.t,
            samples: samples.clone(),
            meta_cost: meta,
        });
        for k in 1..=per_plan {
            let t = ego.t + dt;
            ego = EgoState::from_samples(&samples, k, t);
            step += 1;
            let g = global(&centerline, ego.x, ego.y)?;
            let path_length = (g[0] - last_global[0]).hypot(g[1] - last_global[1]);
            last_global = g;
            let inc = drift_increment(&ego, &scene.features, &cfg.drift);
            cumulative += inc;
            log.rows.push(LogRow {
                step,
                plan_id,
                state: ego,
                drift_increment: inc,
                cumulative_drift: cumulative,
                path_length,
            });
            if let Some(obstacle) = collision_at(scene, ego.x, ego.y, t) {
                log.collisions.push(CollisionEvent { step, t, obstacle });
                break 'episode;
            }
            if ego.x >= scene.run_length || step >= cfg.max_steps {
                break 'episode;
            }
        }
        if let (Some(cem), Controller::CemMpc(pc)) = (planner.cem.as_mut(), controller) {
            let basis = crate::trajectory::Basis::new(cfg.basis)?;
            let mu = warm_start_mean(&basis, &samples, per_plan, pc.cem.sample_longitudinal)?;
            let sigma = cem.distribution().sigma.clone();
            cem.set_distribution(SamplingDistribution::new(mu, sigma)?)?;
        }
    }
    Ok(log)
}

/// One CEM-MPC plan from the scene's start state with a fresh distribution.
pub fn plan_from_start(
    scene: &Scene,
    pc: &PlannerConfig,
    basis: BasisSpec,
) -> Result<PlanOutcome<Candidate>, SimError> {
    scene.validate()?;
    let cfg = EpisodeConfig {
        basis,
        ..Default::default()
    };
    let ego = EgoState::start(scene);
    let spec = problem(scene, &cfg, &ego, pc.weights);
    let solver = BatchSolver::new(&spec, pc.solver).map_err(CemError::from)?;
    let dist = initial_distribution(solver.basis(), &pc.cem, ego.y, ego.x, scene.v_des)?;
    let objective = TrajectoryObjective {
        solver: &solver,
        meta: scene_meta(scene, &pc.meta),
        template_cx: straight_longitudinal(solver.basis(), ego.x, scene.v_des),
        sample_longitudinal: pc.cem.sample_longitudinal,
    };
    Ok(Cem::new(pc.cem, dist)?.plan(&objective)?)
}

/// The single straight-line-init reference plan from the scene's start state.
pub fn single_init_from_start(
    scene: &Scene,
    pc: &PlannerConfig,
    basis: BasisSpec,
) -> Result<Candidate, SimError> {
    scene.validate()?;
    let cfg = EpisodeConfig {
        basis,
        ..Default::default()
    };
    let spec = problem(scene, &cfg, &EgoState::start(scene), pc.weights);
    Ok(single_init_plan(&spec, pc.solver, &scene_meta(scene, &pc.meta))?)
}

/// The planning problem posed at the scene's start state.
pub fn start_problem(scene: &Scene, basis: BasisSpec, weights: CostWeights) -> ProblemSpec {
    let cfg = EpisodeConfig {
        basis,
        ..Default::default()
    };
    problem(scene, &cfg, &EgoState::start(scene), weights)
}

fn scene_meta(scene: &Scene, base: &MetaCostParams) -> MetaCostParams {
    MetaCostParams {
        kappa_max: scene.kappa_max,
        y_d: scene.road_width,
        ..*base
    }
}

fn problem(
    scene: &Scene,
    cfg: &EpisodeConfig,
    ego: &EgoState,
    weights: CostWeights,
) -> ProblemSpec {
    let mut spec = ProblemSpec::new(
        cfg.basis,
        ego.boundary(),
        scene.v_max,
        scene.a_max,
        scene.v_des,
    );
    spec.features = scene.features.clone();
    spec.obstacles = obstacle_tracks(scene, ego.t, &cfg.basis);
    spec.weights = weights;
    spec.feature_gate = DEFAULT_FEATURE_GATE;
    spec
}

fn plan_once(
    scene: &Scene,
    controller: &Controller,
    cfg: &EpisodeConfig,
    ego: &EgoState,
    state: &mut PlannerState,
) -> Result<(TrajectorySamples, Option<f64>), SimError> {
    match controller {
        Controller::Baseline => {
            let spec = problem(scene, cfg, ego, CostWeights::default());
            let solver =
                BatchSolver::new(&spec, SolverSettings::default()).map_err(CemError::from)?;
            let init = TrajectoryCoeffs {
                cx: straight_longitudinal(solver.basis(), ego.x, scene.v_des),
                cy: vec![0.0; cfg.basis.n_coeffs()],
            };
            let coeffs = solver.project_boundary(&init).map_err(CemError::from)?;
            Ok((solver.basis().evaluate(&coeffs)?, None))
        }
        Controller::CemMpc(pc) => {
            let spec = problem(scene, cfg, ego, pc.weights);
            let solver = BatchSolver::new(&spec, pc.solver).map_err(CemError::from)?;
            let meta = scene_meta(scene, &pc.meta);
            if state.cem.is_none() {
                let dist =
                    initial_distribution(solver.basis(), &pc.cem, ego.y, ego.x, scene.v_des)?;
                state.cem = Some(Cem::new(pc.cem, dist)?);
            }
            let cem = state.cem.as_mut().expect("initialized above");
            let objective = TrajectoryObjective {
                solver: &solver,
                meta,
                template_cx: straight_longitudinal(solver.basis(), ego.x, scene.v_des),
                sample_longitudinal: pc.cem.sample_longitudinal,
            };
            let out = cem.plan(&objective)?;
            let Candidate {
                samples, meta_cost, ..
            } = out.best;
            Ok((samples, Some(meta_cost)))
        }
    }
}
