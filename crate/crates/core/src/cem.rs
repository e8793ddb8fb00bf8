//! Cross-entropy sampling of initializations around the batch optimizer.
//!
//! One planning call runs `cem_iters` cycles of: draw initializations from a
//! Gaussian, optimize each of them, score the results with the meta-cost,
//! keep the `n_elite` best and refit the Gaussian to them plus a few fresh
//! smoothness-noise samples. The distribution outlives the call so the next
//! receding-horizon step starts from it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CemError;
use crate::frenet::curvature;
use crate::problem::ProblemSpec;
use crate::solver::{BatchSolver, SolveResult, SolverSettings};
use crate::trajectory::{Basis, TrajectoryCoeffs, TrajectorySamples};

/// Diagonal regularizer added to every refitted covariance.
pub const COVARIANCE_REGULARIZER: f64 = 1e-6;

/// Ranking offset for optimizer results that end outside tolerance. They
/// stay rankable (so the distribution can still move when nothing is
/// feasible yet) but always sort behind every feasible result.
pub const INFEASIBLE_PENALTY: f64 = 1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingDistribution {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl SamplingDistribution {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self, CemError> {
        let n = mu.len();
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(CemError::InvalidConfig(format!(
                "covariance is {}x{} for a mean of length {n}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(CemError::InvalidConfig("non-finite distribution".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Square-root factor `L` with `L Lᵀ = sigma`, from a symmetric
    /// eigendecomposition so singular (even zero) covariances are fine.
    pub fn sqrt_factor(&self) -> Result<DMatrix<f64>, CemError> {
        let sym = (&self.sigma + self.sigma.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.eigenvalues.min();
        if min < -1e-10 * scale.max(1.0) {
            return Err(CemError::NotPsd {
                min_eigenvalue: min,
            });
        }
        let mut l = eig.eigenvectors;
        for (j, lambda) in eig.eigenvalues.iter().enumerate() {
            let s = lambda.max(0.0).sqrt();
            l.column_mut(j).scale_mut(s);
        }
        Ok(l)
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<DVector<f64>>, CemError> {
        let l = self.sqrt_factor()?;
        Ok(draw(&self.mu, &l, n, rng))
    }
}

fn draw(mu: &DVector<f64>, l: &DMatrix<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(mu.len(), |_, _| StandardNormal.sample(rng));
            mu + l * z
        })
        .collect()
}

/// `sigma² (AᵀA)⁻¹` with `A` the `(dim+2) x dim` second-difference matrix
/// that includes the two boundary rows on each end, so `AᵀA` is invertible.
pub fn smoothness_covariance(dim: usize, sigma: f64) -> Result<DMatrix<f64>, CemError> {
    if dim < 3 {
        return Err(CemError::InvalidConfig(format!(
            "smoothness covariance needs dim >= 3, got {dim}"
        )));
    }
    let mut a = DMatrix::zeros(dim + 2, dim);
    for i in 0..dim + 2 {
        for (offset, c) in [(2usize, 1.0), (1, -2.0), (0, 1.0)] {
            if i >= offset && i - offset < dim {
                a[(i, i - offset)] = c;
            }
        }
    }
    let ata = a.transpose() * a;
    let inv = ata
        .cholesky()
        .ok_or(CemError::SingularSmoothness)?
        .inverse();
    let k = (&inv + inv.transpose()) * (0.5 * sigma * sigma);
    Ok(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub n_samples: usize,
    pub n_elite: usize,
    pub n_noise: usize,
    pub cem_iters: usize,
    /// Scale of the smoothness noise injected at every refit.
    pub noise_scale: f64,
    /// Scale of the smoothness covariance of a fresh distribution.
    pub init_scale: f64,
    /// Also sample the longitudinal coefficients.
    pub sample_longitudinal: bool,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_elite: 80,
            n_noise: 20,
            cem_iters: 3,
            noise_scale: 0.3,
            init_scale: 1.0,
            sample_longitudinal: false,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<(), CemError> {
        if self.n_samples == 0 || self.n_elite == 0 || self.cem_iters == 0 {
            return Err(CemError::InvalidConfig(
                "sample, elite and cycle counts must be >= 1".into(),
            ));
        }
        if self.n_elite + self.n_noise > self.n_samples {
            return Err(CemError::InvalidConfig(format!(
                "n_elite + n_noise = {} exceeds n_samples = {}",
                self.n_elite + self.n_noise,
                self.n_samples
            )));
        }
        if self.n_elite + self.n_noise < 2 {
            return Err(CemError::InvalidConfig(
                "refit needs at least 2 samples".into(),
            ));
        }
        if !(self.noise_scale >= 0.0) || !(self.init_scale >= 0.0) {
            return Err(CemError::InvalidConfig(
                "scales must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaCostParams {
    /// Largest permissible curvature (1/m).
    pub kappa_max: f64,
    /// Road width (m); the road spans |y| <= y_d / 2.
    pub y_d: f64,
    pub w_curv: f64,
    pub w_road: f64,
}

impl Default for MetaCostParams {
    fn default() -> Self {
        Self {
            kappa_max: 0.2,
            y_d: 7.0,
            w_curv: 1e4,
            w_road: 100.0,
        }
    }
}

impl MetaCostParams {
    pub fn validate(&self) -> Result<(), CemError> {
        if !(self.kappa_max > 0.0)
            || !(self.y_d > 0.0)
            || !(self.w_curv >= 0.0)
            || !(self.w_road >= 0.0)
        {
            return Err(CemError::InvalidConfig(
                "meta-cost parameters out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Primary cost plus squared-hinge penalties on curvature and on leaving the
/// road.
pub fn meta_cost(
    result: &SolveResult,
    samples: &TrajectorySamples,
    params: &MetaCostParams,
) -> Result<f64, CemError> {
    let kappa = curvature(&samples.dx, &samples.dy, &samples.ddx, &samples.ddy)?;
    let half = 0.5 * params.y_d;
    let curv: f64 = kappa
        .iter()
        .map(|k| (k.abs() - params.kappa_max).max(0.0).powi(2))
        .sum();
    let road: f64 = samples
        .y
        .iter()
        .map(|y| (y.abs() - half).max(0.0).powi(2))
        .sum();
    Ok(result.primary_cost + params.w_curv * curv + params.w_road * road)
}

/// Indices of the `q` smallest costs, ascending; ties keep index order.
pub fn select_elites(costs: &[f64], q: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..costs.len()).collect();
    idx.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]));
    idx.truncate(q);
    idx
}

/// Sample mean and unbiased covariance of the union, plus the regularizer.
pub fn update_distribution(
    elites: &[DVector<f64>],
    noise: &[DVector<f64>],
) -> Result<SamplingDistribution, CemError> {
    let all: Vec<&DVector<f64>> = elites.iter().chain(noise).collect();
    if all.len() < 2 {
        return Err(CemError::InvalidConfig(
            "refit needs at least 2 samples".into(),
        ));
    }
    let dim = all[0].len();
    if all.iter().any(|v| v.len() != dim) {
        return Err(CemError::InvalidConfig(
            "refit samples differ in length".into(),
        ));
    }
    let n = all.len() as f64;
    let mut mu = DVector::zeros(dim);
    for v in &all {
        mu += *v;
    }
    mu /= n;
    let mut sigma = DMatrix::zeros(dim, dim);
    for v in &all {
        let d = *v - &mu;
        sigma.ger(1.0, &d, &d, 1.0);
    }
    sigma /= n - 1.0;
    for i in 0..dim {
        sigma[(i, i)] += COVARIANCE_REGULARIZER;
    }
    SamplingDistribution::new(mu, sigma)
}

/// What an objective reports for one sampled vector.
#[derive(Clone, Debug)]
pub struct Scored<T> {
    /// Ranking key for elite selection; `f64::INFINITY` for failures.
    pub rank_cost: f64,
    /// Vector the distribution is refitted to when this sample is elite
    /// (the optimized coefficients, not the raw draw).
    pub refit: DVector<f64>,
    /// Present only for results that may be returned: their meta-cost and
    /// payload.
    pub accepted: Option<(f64, T)>,
    pub failed: bool,
}

/// Batch evaluation plugged into the CEM loop. The trajectory optimizer is
/// one implementation; tests inject closed-form objectives.
pub trait Objective {
    type Output: Clone;
    fn dim(&self) -> usize;
    fn evaluate(&self, samples: &[DVector<f64>]) -> Vec<Scored<Self::Output>>;
}

#[derive(Clone, Debug)]
pub struct PlanOutcome<T> {
    pub best: T,
    pub best_meta: f64,
    /// Best-so-far meta-cost after every cycle.
    pub best_history: Vec<f64>,
    /// Distribution mean after every refit.
    pub mean_history: Vec<DVector<f64>>,
    pub failed: usize,
    pub infeasible: usize,
}

/// Planner state: the configuration, the carried-over distribution and the
/// single generator every draw comes from.
#[derive(Clone, Debug)]
pub struct Cem {
    config: CemConfig,
    dist: SamplingDistribution,
    noise_factor: DMatrix<f64>,
    rng: ChaCha8Rng,
}

impl Cem {
    pub fn new(config: CemConfig, initial: SamplingDistribution) -> Result<Self, CemError> {
        config.validate()?;
        initial.sqrt_factor()?;
        let noise = smoothness_covariance(initial.dim(), config.noise_scale)?;
        let noise_factor =
            SamplingDistribution::new(DVector::zeros(initial.dim()), noise)?.sqrt_factor()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            dist: initial,
            noise_factor,
        })
    }

    pub fn config(&self) -> &CemConfig {
        &self.config
    }

    pub fn distribution(&self) -> &SamplingDistribution {
        &self.dist
    }

    pub fn set_distribution(&mut self, dist: SamplingDistribution) -> Result<(), CemError> {
        if dist.dim() != self.dist.dim() {
            return Err(CemError::InvalidConfig(
                "distribution dimension changed".into(),
            ));
        }
        dist.sqrt_factor()?;
        self.dist = dist;
        Ok(())
    }

    /// Runs the configured number of cycles against `objective`. The
    /// returned result is the best accepted one over all cycles.
    pub fn plan<O: Objective>(
        &mut self,
        objective: &O,
    ) -> Result<PlanOutcome<O::Output>, CemError> {
        if objective.dim() != self.dist.dim() {
            return Err(CemError::InvalidConfig(format!(
                "objective dimension {} does not match distribution dimension {}",
                objective.dim(),
                self.dist.dim()
            )));
        }
        let cfg = self.config;
        let mut best: Option<(f64, O::Output)> = None;
        let mut best_history = Vec::with_capacity(cfg.cem_iters);
        let mut mean_history = Vec::with_capacity(cfg.cem_iters);
        let (mut failed, mut infeasible) = (0, 0);
        for _ in 0..cfg.cem_iters {
            let draws = self.dist.sample(cfg.n_samples, &mut self.rng)?;
            let scored = objective.evaluate(&draws);
            for s in &scored {
                if s.failed {
                    failed += 1;
                    continue;
                }
                match &s.accepted {
                    Some((meta, out)) => {
                        if best.as_ref().map_or(true, |(b, _)| meta < b) {
                            best = Some((*meta, out.clone()));
                        }
                    }
                    None => infeasible += 1,
                }
            }
            best_history.push(best.as_ref().map_or(f64::INFINITY, |(b, _)| *b));

            let costs: Vec<f64> = scored.iter().map(|s| s.rank_cost).collect();
            let elite_idx: Vec<usize> = select_elites(&costs, cfg.n_elite)
                .into_iter()
                .filter(|&i| costs[i].is_finite())
                .collect();
            if elite_idx.is_empty() {
                continue;
            }
            let elites: Vec<DVector<f64>> =
                elite_idx.iter().map(|&i| scored[i].refit.clone()).collect();
            let elite_mean = elites
                .iter()
                .fold(DVector::zeros(self.dist.dim()), |acc, v| acc + v)
                / elites.len() as f64;
            let noise = draw(&elite_mean, &self.noise_factor, cfg.n_noise, &mut self.rng);
            if elites.len() + noise.len() >= 2 {
                self.dist = update_distribution(&elites, &noise)?;
            }
            mean_history.push(self.dist.mu.clone());
        }
        match best {
            Some((best_meta, best)) => Ok(PlanOutcome {
                best,
                best_meta,
                best_history,
                mean_history,
                failed,
                infeasible,
            }),
            None => Err(CemError::PlanningFailure {
                attempted: cfg.n_samples * cfg.cem_iters,
                failed,
                infeasible,
            }),
        }
    }
}

/// A solved candidate trajectory.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub result: SolveResult,
    pub samples: TrajectorySamples,
    pub meta_cost: f64,
}

/// The trajectory optimizer as a CEM objective. Sampled vectors hold the
/// lateral coefficients, followed by the longitudinal ones when those are
/// sampled too; otherwise `template_cx` supplies the longitudinal axis.
pub struct TrajectoryObjective<'a> {
    pub solver: &'a BatchSolver,
    pub meta: MetaCostParams,
    pub template_cx: Vec<f64>,
    pub sample_longitudinal: bool,
}

impl TrajectoryObjective<'_> {
    fn split(&self, v: &DVector<f64>) -> TrajectoryCoeffs {
        let n = self.template_cx.len();
        let cy = v.as_slice()[..n].to_vec();
        let cx = if self.sample_longitudinal {
            v.as_slice()[n..2 * n].to_vec()
        } else {
            self.template_cx.clone()
        };
        TrajectoryCoeffs { cx, cy }
    }

    fn join(&self, c: &TrajectoryCoeffs) -> DVector<f64> {
        if self.sample_longitudinal {
            DVector::from_iterator(2 * c.cy.len(), c.cy.iter().chain(&c.cx).copied())
        } else {
            DVector::from_column_slice(&c.cy)
        }
    }

    fn score(&self, v: &DVector<f64>) -> Scored<Candidate> {
        let fail = |refit: DVector<f64>| Scored {
            rank_cost: f64::INFINITY,
            refit,
            accepted: None,
            failed: true,
        };
        let Ok(init) = self.solver.project_boundary(&self.split(v)) else {
            return fail(v.clone());
        };
        let Ok(result) = self.solver.solve(&init) else {
            return fail(v.clone());
        };
        let refit = self.join(&result.coeffs);
        let Ok(samples) = self.solver.basis().evaluate(&result.coeffs) else {
            return fail(refit);
        };
        let Ok(meta) = meta_cost(&result, &samples, &self.meta) else {
            return fail(refit);
        };
        let tol = self.solver.settings().tolerance;
        if result.is_feasible(tol) {
            Scored {
                rank_cost: meta,
                refit,
                accepted: Some((
                    meta,
                    Candidate {
                        result,
                        samples,
                        meta_cost: meta,
                    },
                )),
                failed: false,
            }
        } else {
            Scored {
                rank_cost: INFEASIBLE_PENALTY * (1.0 + result.residuals.inequality_sum()) + meta,
                refit,
                accepted: None,
                failed: false,
            }
        }
    }
}

impl Objective for TrajectoryObjective<'_> {
    type Output = Candidate;

    fn dim(&self) -> usize {
        self.template_cx.len() * if self.sample_longitudinal { 2 } else { 1 }
    }

    fn evaluate(&self, samples: &[DVector<f64>]) -> Vec<Scored<Candidate>> {
        if self.solver.settings().parallel {
            samples.par_iter().map(|v| self.score(v)).collect()
        } else {
            samples.iter().map(|v| self.score(v)).collect()
        }
    }
}

/// Longitudinal coefficients of a constant-speed run at `speed` from `x0`.
pub fn straight_longitudinal(basis: &Basis, x0: f64, speed: f64) -> Vec<f64> {
    let spec = basis.spec();
    let m = spec.degree as f64;
    (0..spec.n_coeffs())
        .map(|k| x0 + speed * spec.horizon() * k as f64 / m)
        .collect()
}

/// Initial distribution centred on holding lateral offset `d0`.
pub fn initial_distribution(
    basis: &Basis,
    config: &CemConfig,
    d0: f64,
    x0: f64,
    speed: f64,
) -> Result<SamplingDistribution, CemError> {
    let n = basis.spec().n_coeffs();
    let lat = smoothness_covariance(n, config.init_scale)?;
    if config.sample_longitudinal {
        let mut mu = DVector::from_element(2 * n, d0);
        for (k, c) in straight_longitudinal(basis, x0, speed)
            .into_iter()
            .enumerate()
        {
            mu[n + k] = c;
        }
        let mut sigma = DMatrix::zeros(2 * n, 2 * n);
        sigma.view_mut((0, 0), (n, n)).copy_from(&lat);
        sigma.view_mut((n, n), (n, n)).copy_from(&lat);
        SamplingDistribution::new(mu, sigma)
    } else {
        SamplingDistribution::new(DVector::from_element(n, d0), lat)
    }
}

/// Optimizes one problem from a single straight-line initialization (the
/// lane the ego is in, at `v_des`) and scores it; the non-sampling
/// reference planner.
pub fn single_init_plan(
    spec: &ProblemSpec,
    settings: SolverSettings,
    meta: &MetaCostParams,
) -> Result<Candidate, CemError> {
    let solver = BatchSolver::new(spec, settings)?;
    let n = spec.basis.n_coeffs();
    let init = TrajectoryCoeffs {
        cx: straight_longitudinal(solver.basis(), spec.b0.pos[0], spec.v_des),
        cy: vec![spec.b0.pos[1]; n],
    };
    let init = solver.project_boundary(&init)?;
    let result = solver.solve(&init)?;
    let samples = solver.basis().evaluate(&result.coeffs)?;
    let meta_cost = meta_cost(&result, &samples, meta)?;
    Ok(Candidate {
        result,
        samples,
        meta_cost,
    })
}

/// Mean for the next receding-horizon step: the tail of `best` from step
/// `k`, held at its last value to fill the horizon, refitted to the basis.
pub fn warm_start_mean(
    basis: &Basis,
    best: &TrajectorySamples,
    k: usize,
    sample_longitudinal: bool,
) -> Result<DVector<f64>, CemError> {
    let n = best.len();
    let k = k.min(n - 1);
    let shift = |v: &[f64]| -> Vec<f64> { (0..n).map(|t| v[(t + k).min(n - 1)]).collect() };
    let cy = basis.fit_axis(&shift(&best.y))?;
    if sample_longitudinal {
        // longitudinal tail continues at the final speed instead of holding
        let dt = basis.spec().dt;
        let last = best.x[n - 1];
        let v_end = best.dx[n - 1];
        let xs: Vec<f64> = (0..n)
            .map(|t| {
                if t + k < n {
                    best.x[t + k]
                } else {
                    last + v_end * dt * (t + k + 1 - n) as f64
                }
            })
            .collect();
        let cx = basis.fit_axis(&xs)?;
        Ok(DVector::from_iterator(
            2 * cy.len(),
            cy.into_iter().chain(cx),
        ))
    } else {
        Ok(DVector::from_vec(cy))
    }
}
