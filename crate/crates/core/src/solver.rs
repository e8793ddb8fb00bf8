//! Batch non-convex trajectory optimizer.
//!
//! Each problem instance is solved by an augmented-Lagrangian / ADMM scheme:
//! velocity, acceleration and collision constraints are split into auxiliary
//! variables that are projected onto their feasible sets (a disc for the
//! bounds, the exterior of a unit circle in ellipse-scaled coordinates for
//! obstacles), and the coefficient update is an unconstrained quadratic
//! program. The speed-tracking and feature terms are replaced by quadratic
//! majorizers around the current iterate, so the quadratic core has the same
//! Hessian for every instance of the batch. Its inverse is computed once per
//! penalty level and shared.
//!
//! Boundary equalities are never relaxed: the first three Bernstein
//! coefficients of each axis are pinned by `b0`, the last ones are tied so
//! that the terminal lateral velocity and both terminal accelerations vanish.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SolverError;
use crate::problem::{norm2, CostTerms, FeatureIndex, ProblemSpec, Residuals};
use crate::trajectory::{Basis, TrajectoryCoeffs, TrajectorySamples};

/// Boundary equalities are held to this by construction.
pub const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub max_iters: usize,
    /// Collision penalty schedule: `min(rho_init * rho_growth^k, rho_max)`.
    pub rho_init: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
    /// Speed and acceleration penalties follow the same growth with their
    /// own start and cap. Keeping them low stops inactive bounds from acting
    /// as a heavy proximal brake on the iterate.
    pub rho_kin_init: f64,
    pub rho_kin_max: f64,
    /// Inequality tolerance on speed, acceleration and collision residuals.
    pub tolerance: f64,
    /// Largest coefficient change (m) accepted as a fixed point.
    pub step_tol: f64,
    /// Stop once the best iterate has not improved by more than
    /// `stall_rel_tol` (relative) for this many iterations; 0 disables the
    /// rule.
    pub stall_iters: usize,
    pub stall_rel_tol: f64,
    /// Relative tightening applied inside the projections.
    pub margin: f64,
    /// Weight of the tolerance excess in the penalized objective used to pick
    /// the returned iterate.
    pub penalty_weight: f64,
    pub parallel: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rho_init: 20.0,
            rho_growth: 2.0,
            rho_max: 1e4,
            rho_kin_init: 1.0,
            rho_kin_max: 100.0,
            tolerance: 1e-3,
            step_tol: 1e-2,
            stall_iters: 2,
            stall_rel_tol: 1e-3,
            margin: 0.01,
            penalty_weight: 1e6,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub coeffs: TrajectoryCoeffs,
    pub primary_cost: f64,
    pub residuals: Residuals,
    pub converged: bool,
    pub iterations: usize,
}

impl SolveResult {
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.residuals.within(tol, BOUNDARY_TOL)
    }
}

/// Dense `rows x cols` matrix stored column-major, so both the forward
/// product (column axpys) and the transposed one (column dots) stream
/// contiguous memory over the long `rows` dimension.
#[derive(Clone, Debug)]
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dot product with four independent accumulators so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Dense {
    fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }

    #[inline]
    fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    /// `out = self * z + offset`
    #[inline]
    fn mul_add(&self, z: &[f64], offset: &[f64], out: &mut [f64]) {
        out.copy_from_slice(offset);
        for (c, &zc) in z.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.col(c)) {
                *o += a * zc;
            }
        }
    }

    /// `out[c] += col_c · v`
    #[inline]
    fn tr_mul_acc(&self, v: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o += dot(self.col(c), v);
        }
    }

    /// `out = self * z` for the small square inverse.
    #[inline]
    fn mul(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, &zc) in z.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.col(c)) {
                *o += a * zc;
            }
        }
    }
}

/// One axis after eliminating the boundary equalities: `c = map * z + fixed`.
#[derive(Clone, Debug)]
struct AxisModel {
    n_free: usize,
    free_index: Vec<usize>,
    map: DMatrix<f64>,
    fixed: DVector<f64>,
    pos: Dense,
    vel: Dense,
    acc: Dense,
    pos0: Vec<f64>,
    vel0: Vec<f64>,
    acc0: Vec<f64>,
    /// Inverse Hessians per penalty level.
    hinv: Vec<Dense>,
}

enum Terminal {
    /// Terminal acceleration zero (longitudinal axis).
    AccZero,
    /// Terminal velocity and acceleration zero (lateral axis).
    VelAccZero,
}

impl AxisModel {
    fn new(basis: &Basis, p0: f64, v0: f64, a0: f64, terminal: Terminal) -> Self {
        let m = basis.spec().degree;
        let horizon = basis.spec().horizon();
        let n_coeffs = m + 1;
        let free_index: Vec<usize> = match terminal {
            Terminal::AccZero => (3..m).collect(),
            Terminal::VelAccZero => (3..m - 1).collect(),
        };
        let n_free = free_index.len();
        let mut map = DMatrix::zeros(n_coeffs, n_free);
        let mut fixed = DVector::zeros(n_coeffs);
        let c0 = p0;
        let c1 = p0 + v0 * horizon / m as f64;
        let c2 = 2.0 * c1 - c0 + a0 * horizon * horizon / (m * (m - 1)) as f64;
        fixed[0] = c0;
        fixed[1] = c1;
        fixed[2] = c2;
        for (j, &i) in free_index.iter().enumerate() {
            map[(i, j)] = 1.0;
        }
        match terminal {
            Terminal::AccZero => {
                // c_m = 2 c_{m-1} - c_{m-2}
                let row = map.row(m - 1) * 2.0 - map.row(m - 2);
                map.set_row(m, &row);
                fixed[m] = 2.0 * fixed[m - 1] - fixed[m - 2];
            }
            Terminal::VelAccZero => {
                // c_{m-1} = c_m = c_{m-2}
                let row = map.row(m - 2).clone_owned();
                map.set_row(m - 1, &row);
                map.set_row(m, &row);
                fixed[m - 1] = fixed[m - 2];
                fixed[m] = fixed[m - 2];
            }
        }
        let pos = basis.pos() * &map;
        let vel = basis.vel() * &map;
        let acc = basis.acc() * &map;
        let pos0 = basis.pos() * &fixed;
        let vel0 = basis.vel() * &fixed;
        let acc0 = basis.acc() * &fixed;
        Self {
            n_free,
            free_index,
            pos: Dense::from_dmatrix(&pos),
            vel: Dense::from_dmatrix(&vel),
            acc: Dense::from_dmatrix(&acc),
            pos0: pos0.as_slice().to_vec(),
            vel0: vel0.as_slice().to_vec(),
            acc0: acc0.as_slice().to_vec(),
            map,
            fixed,
            hinv: Vec::new(),
        }
    }

    fn gram(d: &Dense) -> DMatrix<f64> {
        DMatrix::from_fn(d.cols, d.cols, |i, j| dot(d.col(i), d.col(j)))
    }

    fn build_inverses(
        &mut self,
        h0: DMatrix<f64>,
        h_kin: DMatrix<f64>,
        h_obs: DMatrix<f64>,
        kin_levels: &[f64],
        obs_levels: &[f64],
    ) -> Result<(), SolverError> {
        // a trace-relative ridge keeps the core invertible when every cost
        // weight vanishes and no penalty is engaged yet
        let ridge = 1e-12 * h0.diagonal().amax().max(1e-12);
        let n = h0.nrows();
        self.hinv = kin_levels
            .iter()
            .flat_map(|&kin| obs_levels.iter().map(move |&obs| (kin, obs)))
            .map(|(kin, obs)| {
                let h = &h0 + &h_kin * kin + &h_obs * obs + DMatrix::identity(n, n) * ridge;
                h.cholesky()
                    .map(|c| Dense::from_dmatrix(&c.inverse()))
                    .ok_or_else(|| {
                        SolverError::InvalidProblem(
                            "quadratic core is not positive definite".into(),
                        )
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(())
    }

    fn coeffs(&self, z: &[f64]) -> Vec<f64> {
        (&self.map * DVector::from_column_slice(z) + &self.fixed)
            .as_slice()
            .to_vec()
    }

    fn free_from(&self, c: &[f64]) -> Vec<f64> {
        self.free_index.iter().map(|&i| c[i]).collect()
    }
}

/// Precomputed solver state for one [`ProblemSpec`]; shared read-only by
/// every element of a batch.
#[derive(Clone, Debug)]
pub struct BatchSolver {
    spec: ProblemSpec,
    settings: SolverSettings,
    basis: Basis,
    features: FeatureIndex,
    feat_max: f64,
    /// Kinematic penalty levels; the first is zero (bounds not engaged).
    kin_levels: Vec<f64>,
    obs_levels: Vec<f64>,
    ax: AxisModel,
    ay: AxisModel,
}

/// Per-solve scratch. Auxiliaries `s*` and scaled duals `w*` are stored per
/// axis; obstacle arrays are `n_obs` consecutive blocks of `n_steps`.
struct Workspace {
    zx: Vec<f64>,
    zy: Vec<f64>,
    next_x: Vec<f64>,
    next_y: Vec<f64>,
    s: TrajectorySamples,
    feat_target: Vec<f64>,
    feat_weight: Vec<f64>,
    sv: [Vec<f64>; 2],
    wv: [Vec<f64>; 2],
    sa: [Vec<f64>; 2],
    wa: [Vec<f64>; 2],
    so: [Vec<f64>; 2],
    wo: [Vec<f64>; 2],
    ux: Vec<f64>,
    uy: Vec<f64>,
    rpos: Vec<f64>,
    rvel: Vec<f64>,
    racc: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

#[inline]
fn project_disc(q: [f64; 2], radius: f64) -> [f64; 2] {
    let n2 = q[0] * q[0] + q[1] * q[1];
    if n2 <= radius * radius {
        q
    } else {
        let k = radius / n2.sqrt();
        [q[0] * k, q[1] * k]
    }
}

/// Moves a point inside the scaled obstacle circle onto its boundary along
/// the lateral axis, on the given side, keeping the longitudinal coordinate.
/// Lateral escape is the only resolution a lane-following vehicle has; the
/// Euclidean radial projection of a point straight ahead of the ego would
/// instead ask the longitudinal profile to jump across the obstacle.
#[inline]
fn project_exterior(q: [f64; 2], radius: f64, side: f64) -> [f64; 2] {
    let n2 = q[0] * q[0] + q[1] * q[1];
    if n2 >= radius * radius {
        q
    } else {
        [q[0], side * (radius * radius - q[0] * q[0]).sqrt()]
    }
}

impl BatchSolver {
    pub fn new(spec: &ProblemSpec, settings: SolverSettings) -> Result<Self, SolverError> {
        spec.validate()?;
        if settings.max_iters == 0
            || !(settings.rho_init > 0.0)
            || !(settings.rho_kin_init > 0.0)
            || !(settings.rho_growth >= 1.0)
        {
            return Err(SolverError::InvalidProblem(
                "invalid solver settings".into(),
            ));
        }
        let basis = Basis::new(spec.basis)?;
        let b0 = &spec.b0;
        let mut ax = AxisModel::new(&basis, b0.pos[0], b0.vel[0], b0.acc[0], Terminal::AccZero);
        let mut ay = AxisModel::new(
            &basis,
            b0.pos[1],
            b0.vel[1],
            b0.acc[1],
            Terminal::VelAccZero,
        );

        let features = FeatureIndex::new(&spec.features, spec.feature_gate);
        let feat_max = spec.weights.w_feat * features.max_weight();

        let schedule = |init: f64, max: f64| {
            let mut levels = vec![init.min(max)];
            while levels.len() < settings.max_iters && *levels.last().unwrap() < max {
                levels.push((levels.last().unwrap() * settings.rho_growth).min(max));
                if settings.rho_growth == 1.0 {
                    break;
                }
            }
            levels
        };
        let mut kin_levels = vec![0.0];
        kin_levels.extend(schedule(settings.rho_kin_init, settings.rho_kin_max));
        let obs_levels = schedule(settings.rho_init, settings.rho_max);

        let w = &spec.weights;
        let inv_a2: f64 = spec.obstacles.iter().map(|o| 1.0 / (o.a * o.a)).sum();
        let inv_b2: f64 = spec.obstacles.iter().map(|o| 1.0 / (o.b * o.b)).sum();
        for (model, inv_axis2, feat) in [(&mut ax, inv_a2, 0.0), (&mut ay, inv_b2, feat_max)] {
            let pp = AxisModel::gram(&model.pos);
            let vv = AxisModel::gram(&model.vel);
            let aa = AxisModel::gram(&model.acc);
            let h0 = &aa * (2.0 * w.w_acc) + &vv * (2.0 * w.w_vel) + &pp * (2.0 * feat);
            model.build_inverses(h0, &vv + &aa, &pp * inv_axis2, &kin_levels, &obs_levels)?;
        }

        Ok(Self {
            spec: spec.clone(),
            settings,
            basis,
            features,
            feat_max,
            kin_levels,
            obs_levels,
            ax,
            ay,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// Overwrites the pinned and tied coefficients of `init` so the boundary
    /// conditions hold exactly.
    pub fn project_boundary(
        &self,
        init: &TrajectoryCoeffs,
    ) -> Result<TrajectoryCoeffs, SolverError> {
        self.check_init(init)?;
        Ok(TrajectoryCoeffs {
            cx: self.ax.coeffs(&self.ax.free_from(&init.cx)),
            cy: self.ay.coeffs(&self.ay.free_from(&init.cy)),
        })
    }

    fn check_init(&self, init: &TrajectoryCoeffs) -> Result<(), SolverError> {
        let n = self.spec.basis.n_coeffs();
        for c in [&init.cx, &init.cy] {
            if c.len() != n {
                return Err(SolverError::Trajectory(
                    crate::error::TrajectoryError::Shape {
                        expected: n,
                        got: c.len(),
                    },
                ));
            }
        }
        if !init.is_finite() {
            return Err(SolverError::InvalidProblem(
                "non-finite initial coefficients".into(),
            ));
        }
        Ok(())
    }

    fn workspace(&self) -> Workspace {
        let n = self.spec.basis.n_steps;
        let no = n * self.spec.obstacles.len();
        let pair = |len: usize| [vec![0.0; len], vec![0.0; len]];
        Workspace {
            zx: vec![0.0; self.ax.n_free],
            zy: vec![0.0; self.ay.n_free],
            next_x: vec![0.0; self.ax.n_free],
            next_y: vec![0.0; self.ay.n_free],
            s: TrajectorySamples::with_len(n),
            feat_target: vec![0.0; n],
            feat_weight: vec![0.0; n],
            sv: pair(n),
            wv: pair(n),
            sa: pair(n),
            wa: pair(n),
            so: pair(no),
            wo: pair(no),
            ux: vec![0.0; n],
            uy: vec![0.0; n],
            rpos: vec![0.0; n],
            rvel: vec![0.0; n],
            racc: vec![0.0; n],
            gx: vec![0.0; self.ax.n_free],
            gy: vec![0.0; self.ay.n_free],
        }
    }

    /// Evaluates the iterate in `ws.zx, ws.zy`: samples, unit velocity
    /// directions, gated feature targets, primary cost and residuals.
    fn sample(&self, ws: &mut Workspace) -> (f64, Residuals) {
        let spec = &self.spec;
        let s = &mut ws.s;
        self.ax.pos.mul_add(&ws.zx, &self.ax.pos0, &mut s.x);
        self.ax.vel.mul_add(&ws.zx, &self.ax.vel0, &mut s.dx);
        self.ax.acc.mul_add(&ws.zx, &self.ax.acc0, &mut s.ddx);
        self.ay.pos.mul_add(&ws.zy, &self.ay.pos0, &mut s.y);
        self.ay.vel.mul_add(&ws.zy, &self.ay.vel0, &mut s.dy);
        self.ay.acc.mul_add(&ws.zy, &self.ay.acc0, &mut s.ddy);
        let mut terms = CostTerms::default();
        let mut speed_max = 0.0f64;
        let mut acc2_max = 0.0f64;
        for t in 0..s.len() {
            let speed = norm2(s.dx[t], s.dy[t]);
            if speed > 1e-9 {
                ws.ux[t] = s.dx[t] / speed;
                ws.uy[t] = s.dy[t] / speed;
            } else {
                ws.ux[t] = 1.0;
                ws.uy[t] = 0.0;
            }
            speed_max = speed_max.max(speed);
            let acc2 = s.ddx[t] * s.ddx[t] + s.ddy[t] * s.ddy[t];
            acc2_max = acc2_max.max(acc2);
            terms.acceleration += acc2;
            terms.velocity += (speed - spec.v_des) * (speed - spec.v_des);
            match self.features.lookup(s.x[t]) {
                Some(f) => {
                    ws.feat_target[t] = f.d;
                    ws.feat_weight[t] = spec.weights.w_feat * f.weight;
                    terms.feature += f.weight * (s.y[t] - f.d) * (s.y[t] - f.d);
                }
                None => {
                    ws.feat_target[t] = s.y[t];
                    ws.feat_weight[t] = 0.0;
                }
            }
        }
        let mut collision = 0.0f64;
        for o in &spec.obstacles {
            let (ia, ib) = (1.0 / o.a, 1.0 / o.b);
            for (((x, y), ox), oy) in s.x.iter().zip(&s.y).zip(&o.xs).zip(&o.ys) {
                let (u, v) = ((x - ox) * ia, (y - oy) * ib);
                collision = collision.max(1.0 - u * u - v * v);
            }
        }
        let last = s.len() - 1;
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
        let res = Residuals {
            boundary,
            speed_bound: (speed_max - spec.v_max).max(0.0),
            accel_bound: (acc2_max.sqrt() - spec.a_max).max(0.0),
            collision,
        };
        (terms.total(&spec.weights), res)
    }

    fn penalized(&self, cost: f64, r: &Residuals) -> f64 {
        let tol = self.settings.tolerance;
        let excess = (r.speed_bound - tol).max(0.0)
            + (r.accel_bound - tol).max(0.0)
            + (r.collision - tol).max(0.0)
            + (r.boundary - BOUNDARY_TOL).max(0.0);
        cost + self.settings.penalty_weight * excess
    }

    fn result_from(
        &self,
        zx: &[f64],
        zy: &[f64],
        cost: f64,
        r: Residuals,
        converged: bool,
        iterations: usize,
    ) -> SolveResult {
        SolveResult {
            coeffs: TrajectoryCoeffs {
                cx: self.ax.coeffs(zx),
                cy: self.ay.coeffs(zy),
            },
            primary_cost: cost,
            residuals: r,
            converged,
            iterations,
        }
    }

    /// Solves one instance from `init`. The returned iterate minimizes the
    /// penalized objective over all iterates including the projected init.
    pub fn solve(&self, init: &TrajectoryCoeffs) -> Result<SolveResult, SolverError> {
        self.check_init(init)?;
        let spec = &self.spec;
        let set = &self.settings;
        let n = spec.basis.n_steps;
        let v_lim = spec.v_max * (1.0 - set.margin);
        let a_lim = spec.a_max * (1.0 - set.margin);
        let r_lim = 1.0 + set.margin;
        let w = spec.weights;
        let inv_axes: Vec<(f64, f64)> = spec
            .obstacles
            .iter()
            .map(|o| (1.0 / o.a, 1.0 / o.b))
            .collect();

        let mut ws = self.workspace();
        ws.zx = self.ax.free_from(&init.cx);
        ws.zy = self.ay.free_from(&init.cy);
        let (init_cost, init_res) = self.sample(&mut ws);

        // Each obstacle is passed on the side the init takes at its closest
        // approach, so the init alone selects the homotopy class.
        let sides: Vec<f64> = spec
            .obstacles
            .iter()
            .zip(&inv_axes)
            .map(|(o, &(ia, ib))| {
                let mut closest = (f64::INFINITY, 1.0);
                for t in 0..n {
                    let e = [(ws.s.x[t] - o.xs[t]) * ia, (ws.s.y[t] - o.ys[t]) * ib];
                    let d2 = e[0] * e[0] + e[1] * e[1];
                    if d2 < closest.0 {
                        closest = (d2, if e[1] < 0.0 { -1.0 } else { 1.0 });
                    }
                }
                closest.1
            })
            .collect();

        // Speed and acceleration bounds join the augmented Lagrangian only
        // once an iterate violates them. While they are inactive their
        // penalty would act as a proximal brake on the iterate.
        let mut kl = usize::from(init_res.speed_bound > 0.0 || init_res.accel_bound > 0.0);
        // auxiliaries start at the projection of the init, duals at zero
        self.project(
            &mut ws,
            &sides,
            &inv_axes,
            [v_lim, a_lim, r_lim],
            [(kl > 0).then_some(0.0), Some(0.0)],
        );
        let n_obs_levels = self.obs_levels.len();

        let mut best_cost = init_cost;
        let mut best_res = init_res;
        let mut best_score = self.penalized(best_cost, &best_res);
        let mut best_z = (ws.zx.clone(), ws.zy.clone());

        let mut iterations = 0;
        let mut converged = false;
        let mut since_best = 0usize;
        let mut seen_feasible = false;
        for it in 0..set.max_iters {
            iterations = it + 1;
            let ol = it.min(n_obs_levels - 1);
            let kin = self.kin_levels[kl];
            let rho = self.obs_levels[ol];
            let level = kl * n_obs_levels + ol;

            for axis in 0..2 {
                let (model, u) = if axis == 0 {
                    (&self.ax, &ws.ux)
                } else {
                    (&self.ay, &ws.uy)
                };
                for t in 0..n {
                    ws.racc[t] = -2.0 * w.w_acc * model.acc0[t]
                        + kin * (ws.sa[axis][t] - ws.wa[axis][t] - model.acc0[t]);
                    ws.rvel[t] = 2.0 * w.w_vel * (spec.v_des * u[t] - model.vel0[t])
                        + kin * (ws.sv[axis][t] - ws.wv[axis][t] - model.vel0[t]);
                }
                if axis == 1 && self.feat_max > 0.0 {
                    // majorizer of the weighted feature term around the iterate
                    let k = 2.0 * self.feat_max;
                    for t in 0..n {
                        let y = ws.s.y[t];
                        let target =
                            y - ws.feat_weight[t] / self.feat_max * (y - ws.feat_target[t]);
                        ws.rpos[t] = k * (target - model.pos0[t]);
                    }
                } else {
                    ws.rpos.iter_mut().for_each(|v| *v = 0.0);
                }
                for (j, (o, &(ia, ib))) in spec.obstacles.iter().zip(&inv_axes).enumerate() {
                    let (inv, centers) = if axis == 0 { (ia, &o.xs) } else { (ib, &o.ys) };
                    let blk = j * n..(j + 1) * n;
                    let k = rho * inv;
                    for ((((r, so), wo), p0), c) in ws
                        .rpos
                        .iter_mut()
                        .zip(&ws.so[axis][blk.clone()])
                        .zip(&ws.wo[axis][blk])
                        .zip(&model.pos0)
                        .zip(centers)
                    {
                        *r += k * (so - wo - (p0 - c) * inv);
                    }
                }
                let g = if axis == 0 { &mut ws.gx } else { &mut ws.gy };
                g.iter_mut().for_each(|v| *v = 0.0);
                model.acc.tr_mul_acc(&ws.racc, g);
                model.vel.tr_mul_acc(&ws.rvel, g);
                model.pos.tr_mul_acc(&ws.rpos, g);
            }

            self.ax.hinv[level].mul(&ws.gx, &mut ws.next_x);
            self.ay.hinv[level].mul(&ws.gy, &mut ws.next_y);
            if ws.next_x.iter().chain(&ws.next_y).any(|v| !v.is_finite()) {
                return Err(SolverError::Divergence {
                    iteration: iterations,
                });
            }
            let step = ws
                .next_x
                .iter()
                .zip(&ws.zx)
                .chain(ws.next_y.iter().zip(&ws.zy))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            std::mem::swap(&mut ws.zx, &mut ws.next_x);
            std::mem::swap(&mut ws.zy, &mut ws.next_y);
            let (cost, res) = self.sample(&mut ws);
            if !cost.is_finite() {
                return Err(SolverError::Divergence {
                    iteration: iterations,
                });
            }

            // projections and scaled dual ascent, duals rescaled to the next
            // penalty level
            let next_obs = self.obs_levels[(ol + 1).min(n_obs_levels - 1)];
            let kin_scale = if kl > 0 {
                kl = (kl + 1).min(self.kin_levels.len() - 1);
                Some(kin / self.kin_levels[kl])
            } else if res.speed_bound > 0.0 || res.accel_bound > 0.0 {
                kl = 1;
                Some(0.0)
            } else {
                None
            };
            self.project(
                &mut ws,
                &sides,
                &inv_axes,
                [v_lim, a_lim, r_lim],
                [kin_scale, Some(rho / next_obs)],
            );

            let score = self.penalized(cost, &res);
            if score < best_score {
                if score < best_score - set.stall_rel_tol * best_score.abs() {
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                best_score = score;
                best_cost = cost;
                best_res = res;
                best_z.0.copy_from_slice(&ws.zx);
                best_z.1.copy_from_slice(&ws.zy);
            } else {
                since_best += 1;
            }
            let feasible = res.within(set.tolerance, BOUNDARY_TOL);
            seen_feasible |= feasible;
            let fixed_point = step <= set.step_tol && feasible;
            // the stall clock only runs once the iterates themselves have
            // reached the feasible set, so a feasible init cannot end the
            // solve before the penalties have taken hold
            let stalled = set.stall_iters > 0 && seen_feasible && since_best >= set.stall_iters;
            if fixed_point || stalled {
                converged = true;
                break;
            }
        }

        let converged = converged && best_res.within(set.tolerance, BOUNDARY_TOL);
        Ok(self.result_from(
            &best_z.0, &best_z.1, best_cost, best_res, converged, iterations,
        ))
    }

    /// Projects `sample + dual` onto each constraint set. With `scale` zero
    /// the duals are reset (initialization); otherwise they take the scaled
    /// residual `(q - p) * scale`. A `None` scale leaves that group alone.
    fn project(
        &self,
        ws: &mut Workspace,
        sides: &[f64],
        inv_axes: &[(f64, f64)],
        lims: [f64; 3],
        scale: [Option<f64>; 2],
    ) {
        let [v_lim, a_lim, r_lim] = lims;
        let [kin_scale, obs_scale] = scale;
        let n = self.spec.basis.n_steps;
        let s = &ws.s;
        if let Some(kin_scale) = kin_scale {
            for t in 0..n {
                let q = [s.dx[t] + ws.wv[0][t], s.dy[t] + ws.wv[1][t]];
                let p = project_disc(q, v_lim);
                ws.sv[0][t] = p[0];
                ws.sv[1][t] = p[1];
                ws.wv[0][t] = (q[0] - p[0]) * kin_scale;
                ws.wv[1][t] = (q[1] - p[1]) * kin_scale;
                let q = [s.ddx[t] + ws.wa[0][t], s.ddy[t] + ws.wa[1][t]];
                let p = project_disc(q, a_lim);
                ws.sa[0][t] = p[0];
                ws.sa[1][t] = p[1];
                ws.wa[0][t] = (q[0] - p[0]) * kin_scale;
                ws.wa[1][t] = (q[1] - p[1]) * kin_scale;
            }
        }
        let Some(obs_scale) = obs_scale else { return };
        for (j, (o, &(ia, ib))) in self.spec.obstacles.iter().zip(inv_axes).enumerate() {
            let base = j * n;
            for t in 0..n {
                let k = base + t;
                let q = [
                    (s.x[t] - o.xs[t]) * ia + ws.wo[0][k],
                    (s.y[t] - o.ys[t]) * ib + ws.wo[1][k],
                ];
                let p = project_exterior(q, r_lim, sides[j]);
                ws.so[0][k] = p[0];
                ws.so[1][k] = p[1];
                ws.wo[0][k] = (q[0] - p[0]) * obs_scale;
                ws.wo[1][k] = (q[1] - p[1]) * obs_scale;
            }
        }
    }

    /// Solves every init independently; element `i` equals `solve(&inits[i])`.
    pub fn solve_batch(&self, inits: &[TrajectoryCoeffs]) -> Vec<Result<SolveResult, SolverError>> {
        if self.settings.parallel {
            inits.par_iter().map(|init| self.solve(init)).collect()
        } else {
            inits.iter().map(|init| self.solve(init)).collect()
        }
    }
}

pub fn solve_single(
    spec: &ProblemSpec,
    init: &TrajectoryCoeffs,
    settings: SolverSettings,
) -> Result<SolveResult, SolverError> {
    BatchSolver::new(spec, settings)?.solve(init)
}

/// Solves a batch; a setup failure is reported for every element.
pub fn solve_batch(
    spec: &ProblemSpec,
    inits: &[TrajectoryCoeffs],
    settings: SolverSettings,
) -> Vec<Result<SolveResult, SolverError>> {
    match BatchSolver::new(spec, settings) {
        Ok(solver) => solver.solve_batch(inits),
        Err(e) => inits.iter().map(|_| Err(e.clone())).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::TrajectoryError;
    use crate::problem::{primary_cost, residuals, BoundaryState, FeatureAnchor, ObstacleTrack};
    use crate::trajectory::{constant_velocity, BasisSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cruise_spec() -> ProblemSpec {
        let b0 = BoundaryState {
            pos: [0.0, 0.0],
            vel: [10.0, 0.0],
            acc: [0.0, 0.0],
        };
        ProblemSpec::new(BasisSpec::default(), b0, 15.0, 5.0, 10.0)
    }

    fn with_obstacle(x: f64, y: f64) -> ProblemSpec {
        let mut spec = cruise_spec();
        let n = spec.basis.n_steps;
        spec.obstacles.push(ObstacleTrack {
            xs: vec![x; n],
            ys: vec![y; n],
            a: 5.0,
            b: 2.5,
        });
        spec
    }

    fn straight(spec: &ProblemSpec, y: f64) -> TrajectoryCoeffs {
        constant_velocity(&spec.basis, [0.0, y], [spec.v_des, 0.0])
    }

    fn perturbed(spec: &ProblemSpec, seed: u64, scale: f64) -> Vec<TrajectoryCoeffs> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..8)
            .map(|_| {
                let mut c = straight(spec, 0.0);
                c.cy.iter_mut()
                    .for_each(|v| *v += rng.gen_range(-scale..scale));
                c
            })
            .collect()
    }

    /// Residuals and cost recomputed from the returned coefficients.
    fn check_report(spec: &ProblemSpec, r: &SolveResult) {
        let s = Basis::new(spec.basis).unwrap().evaluate(&r.coeffs).unwrap();
        let fresh = residuals(spec, &s);
        assert!((fresh.boundary - r.residuals.boundary).abs() < 1e-9);
        assert!((fresh.speed_bound - r.residuals.speed_bound).abs() < 1e-9);
        assert!((fresh.accel_bound - r.residuals.accel_bound).abs() < 1e-9);
        assert!((fresh.collision - r.residuals.collision).abs() < 1e-9);
        let cost = primary_cost(spec, &s);
        assert!((cost - r.primary_cost).abs() <= 1e-9 * (1.0 + cost));
    }

    #[test]
    fn projections() {
        assert_eq!(project_disc([3.0, 4.0], 10.0), [3.0, 4.0]);
        let p = project_disc([3.0, 4.0], 1.0);
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.8).abs() < 1e-12);
        assert_eq!(project_exterior([2.0, 0.0], 1.0, 1.0), [2.0, 0.0]);
        let p = project_exterior([0.6, 0.1], 1.0, -1.0);
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] + 0.8).abs() < 1e-12);
        let p = project_exterior([0.0, 0.0], 2.0, 1.0);
        assert_eq!(p, [0.0, 2.0]);
    }

    #[test]
    fn ideal_cruise_is_a_fixed_point() {
        let spec = cruise_spec();
        let r = solve_single(&spec, &straight(&spec, 0.0), SolverSettings::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 3, "{} iterations", r.iterations);
        assert!(r.primary_cost < 1e-12);
        check_report(&spec, &r);
    }

    #[test]
    fn static_obstacle_is_passed_laterally() {
        let spec = with_obstacle(30.0, 0.0);
        let init = straight(&spec, 0.0);
        let r = solve_single(&spec, &init, SolverSettings::default()).unwrap();
        assert!(r.converged);
        assert!(r.residuals.collision <= 1e-3, "{:?}", r.residuals);
        assert!(r.residuals.boundary <= BOUNDARY_TOL);
        check_report(&spec, &r);
        let s = Basis::new(spec.basis).unwrap().evaluate(&r.coeffs).unwrap();
        // the init ties on the obstacle axis, which resolves to the left
        let t = (0..s.len())
            .min_by(|&i, &j| (s.x[i] - 30.0).abs().total_cmp(&(s.x[j] - 30.0).abs()))
            .unwrap();
        assert!(s.y[t] > 2.0, "lateral offset at the obstacle {}", s.y[t]);
    }

    #[test]
    fn init_side_selects_the_pass() {
        let spec = with_obstacle(30.0, 0.0);
        let basis = Basis::new(spec.basis).unwrap();
        for side in [-1.0, 1.0] {
            let mut init = straight(&spec, 0.0);
            init.cy.iter_mut().skip(3).for_each(|v| *v = side);
            let r = solve_single(&spec, &init, SolverSettings::default()).unwrap();
            let s = basis.evaluate(&r.coeffs).unwrap();
            assert!(r.residuals.collision <= 1e-3);
            assert!(s.y[50] * side > 2.0, "side {side}: y {}", s.y[50]);
        }
    }

    #[test]
    fn solve_is_deterministic() {
        let spec = with_obstacle(30.0, 0.5);
        let init = &perturbed(&spec, 3, 2.0)[0];
        let solver = BatchSolver::new(&spec, SolverSettings::default()).unwrap();
        assert_eq!(solver.solve(init).unwrap(), solver.solve(init).unwrap());
    }

    #[test]
    fn batch_matches_single_in_any_order() {
        let spec = with_obstacle(30.0, 0.5);
        let inits = perturbed(&spec, 5, 2.0);
        let batch = solve_batch(&spec, &inits, SolverSettings::default());
        for (init, b) in inits.iter().zip(&batch) {
            let single = solve_single(&spec, init, SolverSettings::default()).unwrap();
            assert_eq!(&single, b.as_ref().unwrap());
        }
        let mut reversed = inits.clone();
        reversed.reverse();
        let rb = solve_batch(&spec, &reversed, SolverSettings::default());
        for (a, b) in batch.iter().zip(rb.iter().rev()) {
            assert_eq!(a, b);
        }
        let serial = SolverSettings {
            parallel: false,
            ..Default::default()
        };
        assert_eq!(solve_batch(&spec, &inits, serial), batch);
    }

    #[test]
    fn unconstrained_effort_is_locally_optimal() {
        // Acceleration effort alone: no first-order feasible direction may
        // lower the cost of the returned trajectory.
        let mut spec = cruise_spec();
        spec.b0.vel = [8.0, 1.5];
        spec.b0.acc = [0.5, -0.3];
        spec.weights.w_vel = 0.0;
        let settings = SolverSettings {
            step_tol: 1e-9,
            stall_iters: 0,
            max_iters: 2000,
            ..Default::default()
        };
        let solver = BatchSolver::new(&spec, settings).unwrap();
        let r = solver.solve(&straight(&spec, 0.0)).unwrap();
        assert!(r.residuals.within(1e-3, BOUNDARY_TOL));
        let basis = Basis::new(spec.basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut c = r.coeffs.clone();
            for v in c.cx.iter_mut().chain(c.cy.iter_mut()) {
                *v += rng.gen_range(-1e-3..1e-3);
            }
            let c = solver.project_boundary(&c).unwrap();
            let cost = primary_cost(&spec, &basis.evaluate(&c).unwrap());
            assert!(
                cost >= r.primary_cost - 1e-7 * (1.0 + r.primary_cost),
                "{cost} < {}",
                r.primary_cost
            );
        }
    }

    #[test]
    fn speed_and_accel_bounds_engage_when_pushed() {
        // desired speed above the limit, start braking hard
        let mut spec = cruise_spec();
        spec.v_des = 20.0;
        spec.b0.vel = [14.0, 0.0];
        spec.b0.acc = [4.0, 0.0];
        let init = constant_velocity(&spec.basis, [0.0, 0.0], [20.0, 0.0]);
        let r = solve_single(&spec, &init, SolverSettings::default()).unwrap();
        assert!(r.residuals.speed_bound <= 1e-3, "{:?}", r.residuals);
        assert!(r.residuals.accel_bound <= 1e-3, "{:?}", r.residuals);
        check_report(&spec, &r);
        let s = Basis::new(spec.basis).unwrap().evaluate(&r.coeffs).unwrap();
        let top = s.dx.iter().fold(0.0f64, |m, v| m.max(*v));
        assert!(top > 14.5, "bound should be nearly active, top speed {top}");
    }

    #[test]
    fn feature_pulls_the_lateral_offset() {
        let mut spec = cruise_spec();
        spec.features = (0..40)
            .map(|i| FeatureAnchor::new(4.0 * i as f64, 2.0, 1.0))
            .collect();
        let r = solve_single(&spec, &straight(&spec, 0.0), SolverSettings::default()).unwrap();
        let s = Basis::new(spec.basis).unwrap().evaluate(&r.coeffs).unwrap();
        assert!((s.y[99] - 2.0).abs() < 0.3, "terminal y {}", s.y[99]);
        check_report(&spec, &r);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let spec = cruise_spec();
        let solver = BatchSolver::new(&spec, SolverSettings::default()).unwrap();
        let mut short = straight(&spec, 0.0);
        short.cy.pop();
        assert!(matches!(
            solver.solve(&short),
            Err(SolverError::Trajectory(TrajectoryError::Shape { .. }))
        ));
        let mut nan = straight(&spec, 0.0);
        nan.cx[4] = f64::NAN;
        assert!(matches!(
            solver.solve(&nan),
            Err(SolverError::InvalidProblem(_))
        ));

        let bad = SolverSettings {
            rho_init: 0.0,
            ..Default::default()
        };
        assert!(BatchSolver::new(&spec, bad).is_err());
        let mut track = with_obstacle(10.0, 0.0);
        track.obstacles[0].xs.pop();
        assert!(BatchSolver::new(&track, SolverSettings::default()).is_err());
        let batch = solve_batch(&track, &[straight(&spec, 0.0)], SolverSettings::default());
        assert!(batch[0].is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn boundary_conditions_hold(
            vx in 2.0f64..14.0,
            vy in -1.5f64..1.5,
            ax in -2.0f64..2.0,
            ay in -2.0f64..2.0,
            y0 in -2.0f64..2.0,
            seed in 0u64..1000,
        ) {
            let mut spec = with_obstacle(40.0, -1.0);
            spec.b0 = BoundaryState { pos: [0.0, y0], vel: [vx, vy], acc: [ax, ay] };
            let inits = perturbed(&spec, seed, 3.0);
            let solver = BatchSolver::new(&spec, SolverSettings::default()).unwrap();
            let basis = Basis::new(spec.basis).unwrap();
            for init in &inits {
                let r = solver.solve(init).unwrap();
                let s = basis.evaluate(&r.coeffs).unwrap();
                prop_assert!(residuals(&spec, &s).boundary <= BOUNDARY_TOL);
                prop_assert!(r.residuals.boundary <= BOUNDARY_TOL);
            }
        }
    }
}
