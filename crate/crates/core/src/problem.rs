//! The per-plan trajectory optimization problem: boundary state, bounds,
//! feature anchors, predicted obstacles, and the primary cost.

use serde::{Deserialize, Serialize};

use crate::error::SolverError;
use crate::trajectory::{BasisSpec, TrajectorySamples};

/// Initial boundary state `b0`. The terminal conditions are fixed: lateral
/// velocity and both accelerations vanish at the end of the horizon, the
/// terminal position is free.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub acc: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAnchor {
    pub s: f64,
    pub d: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl FeatureAnchor {
    pub fn new(s: f64, d: f64, weight: f64) -> Self {
        Self { s, d, weight }
    }
}

/// Predicted obstacle centers over the horizon with the inflated ellipse
/// semi-axes (`a` along the road, `b` across it).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleTrack {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_acc: f64,
    pub w_feat: f64,
    pub w_vel: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_acc: 1.0,
            w_feat: 2.0,
            w_vel: 1.0,
        }
    }
}

pub const DEFAULT_FEATURE_GATE: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub basis: BasisSpec,
    pub b0: BoundaryState,
    pub v_max: f64,
    pub a_max: f64,
    pub v_des: f64,
    pub features: Vec<FeatureAnchor>,
    pub obstacles: Vec<ObstacleTrack>,
    pub weights: CostWeights,
    /// Longitudinal look-ahead window for feature selection (m).
    pub feature_gate: f64,
}

impl ProblemSpec {
    pub fn new(basis: BasisSpec, b0: BoundaryState, v_max: f64, a_max: f64, v_des: f64) -> Self {
        Self {
            basis,
            b0,
            v_max,
            a_max,
            v_des,
            features: Vec::new(),
            obstacles: Vec::new(),
            weights: CostWeights::default(),
            feature_gate: DEFAULT_FEATURE_GATE,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        self.basis.validate()?;
        if self.basis.degree < 5 {
            return Err(SolverError::InvalidProblem(
                "boundary elimination needs degree >= 5".into(),
            ));
        }
        if !(self.v_max > 0.0) || !(self.a_max > 0.0) {
            return Err(SolverError::InvalidProblem(
                "v_max and a_max must be > 0".into(),
            ));
        }
        let w = &self.weights;
        if !(w.w_acc >= 0.0 && w.w_feat >= 0.0 && w.w_vel >= 0.0) {
            return Err(SolverError::InvalidProblem(
                "cost weights must be >= 0".into(),
            ));
        }
        for (j, o) in self.obstacles.iter().enumerate() {
            if !(o.a > 0.0 && o.b > 0.0) {
                return Err(SolverError::InvalidProblem(format!(
                    "obstacle {j}: semi-axes must be > 0"
                )));
            }
            if o.xs.len() != self.basis.n_steps || o.ys.len() != self.basis.n_steps {
                return Err(SolverError::InvalidProblem(format!(
                    "obstacle {j}: prediction length must equal n_steps {}",
                    self.basis.n_steps
                )));
            }
        }
        if self.features.iter().any(|f| !(f.weight >= 0.0)) {
            return Err(SolverError::InvalidProblem(
                "feature weights must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Features sorted by `s`, then by `|d|`, for gated nearest-ahead lookup.
#[derive(Clone, Debug, Default)]
pub struct FeatureIndex {
    sorted: Vec<FeatureAnchor>,
    gate: f64,
}

impl FeatureIndex {
    pub fn new(features: &[FeatureAnchor], gate: f64) -> Self {
        let mut sorted: Vec<FeatureAnchor> = features
            .iter()
            .copied()
            .filter(|f| f.weight > 0.0)
            .collect();
        sorted.sort_by(|a, b| a.s.total_cmp(&b.s).then(a.d.abs().total_cmp(&b.d.abs())));
        Self { sorted, gate }
    }

    /// The nearest feature ahead of `s_ego` within the gate `[s_ego, s_ego + gate]`.
    pub fn lookup(&self, s_ego: f64) -> Option<&FeatureAnchor> {
        let i = self.sorted.partition_point(|f| f.s < s_ego);
        self.sorted.get(i).filter(|f| f.s <= s_ego + self.gate)
    }

    pub fn max_weight(&self) -> f64 {
        self.sorted.iter().map(|f| f.weight).fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
}

/// The three terms of the primary cost, unweighted sums.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CostTerms {
    pub acceleration: f64,
    pub feature: f64,
    pub velocity: f64,
}

impl CostTerms {
    pub fn total(&self, w: &CostWeights) -> f64 {
        w.w_acc * self.acceleration + w.w_feat * self.feature + w.w_vel * self.velocity
    }
}

pub fn cost_terms(index: &FeatureIndex, v_des: f64, s: &TrajectorySamples) -> CostTerms {
    let mut terms = CostTerms::default();
    for t in 0..s.len() {
        terms.acceleration += s.ddx[t] * s.ddx[t] + s.ddy[t] * s.ddy[t];
        if let Some(f) = index.lookup(s.x[t]) {
            terms.feature += f.weight * (s.y[t] - f.d).powi(2);
        }
        terms.velocity += (norm2(s.dx[t], s.dy[t]) - v_des).powi(2);
    }
    terms
}

/// Acceleration effort, weighted lateral separation from the gated feature,
/// and squared departure from the desired speed, summed over all steps.
pub fn primary_cost(spec: &ProblemSpec, samples: &TrajectorySamples) -> f64 {
    let index = FeatureIndex::new(&spec.features, spec.feature_gate);
    cost_terms(&index, spec.v_des, samples).total(&spec.weights)
}

#[inline]
pub(crate) fn norm2(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// `max(0, 1 - dx^2/a^2 - dy^2/b^2)`, zero outside the ellipse.
#[inline]
pub fn ellipse_violation(dx: f64, dy: f64, a: f64, b: f64) -> f64 {
    let (u, v) = (dx / a, dy / b);
    (1.0 - u * u - v * v).max(0.0)
}

/// Violation per `(step, obstacle)`, indexed `[t][j]`.
pub fn collision_residual(spec: &ProblemSpec, samples: &TrajectorySamples) -> Vec<Vec<f64>> {
    let n = samples.len().min(spec.basis.n_steps);
    (0..n)
        .map(|t| {
            spec.obstacles
                .iter()
                .map(|o| {
                    ellipse_violation(samples.x[t] - o.xs[t], samples.y[t] - o.ys[t], o.a, o.b)
                })
                .collect()
        })
        .collect()
}

/// Maximum constraint violations of one trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub boundary: f64,
    pub speed_bound: f64,
    pub accel_bound: f64,
    pub collision: f64,
}

impl Residuals {
    pub fn within(&self, tol: f64, boundary_tol: f64) -> bool {
        self.boundary <= boundary_tol
            && self.speed_bound <= tol
            && self.accel_bound <= tol
            && self.collision <= tol
    }

    pub fn inequality_sum(&self) -> f64 {
        self.speed_bound + self.accel_bound + self.collision
    }
}

pub fn residuals(spec: &ProblemSpec, s: &TrajectorySamples) -> Residuals {
    let n = s.len();
    let last = n - 1;
    let b0 = &spec.b0;
    let boundary = [
        s.x[0] - b0.pos[0],
        s.y[0] - b0.pos[1],
        s.dx[0] - b0.vel[0],
        s.dy[0] - b0.vel[1],
        s.ddx[0] - b0.acc[0],
        s.ddy[0] - b0.acc[1],
        s.dy[last],
        s.ddx[last],
        s.ddy[last],
    ]
    .iter()
    .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut r = Residuals {
        boundary,
        ..Default::default()
    };
    for t in 0..n {
        r.speed_bound = r.speed_bound.max(norm2(s.dx[t], s.dy[t]) - spec.v_max);
        r.accel_bound = r.accel_bound.max(norm2(s.ddx[t], s.ddy[t]) - spec.a_max);
        for o in &spec.obstacles {
            r.collision = r.collision.max(ellipse_violation(
                s.x[t] - o.xs[t],
                s.y[t] - o.ys[t],
                o.a,
                o.b,
            ));
        }
    }
    r
}
