//! Bernstein-polynomial trajectories sampled on a fixed time grid.
//!
//! A trajectory over the horizon `T = (n_steps - 1) * dt` is written per axis
//! as `p(t) = sum_i c_i B_{i,m}(t / T)`. Samples are taken at `t_k = k * dt`,
//! so the first and last samples sit exactly on the polynomial endpoints.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::TrajectoryError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub n_steps: usize,
    pub dt: f64,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            degree: 10,
            n_steps: 100,
            dt: 0.06,
        }
    }
}

impl BasisSpec {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.degree < 3 {
            return Err(TrajectoryError::InvalidSpec(format!(
                "degree must be >= 3, got {}",
                self.degree
            )));
        }
        if self.n_steps < self.degree + 1 {
            return Err(TrajectoryError::InvalidSpec(format!(
                "n_steps {} < degree + 1 = {}",
                self.n_steps,
                self.degree + 1
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(TrajectoryError::InvalidSpec(format!(
                "dt must be > 0, got {}",
                self.dt
            )));
        }
        Ok(())
    }

    pub fn n_coeffs(&self) -> usize {
        self.degree + 1
    }

    /// Duration spanned by the samples.
    pub fn horizon(&self) -> f64 {
        (self.n_steps - 1) as f64 * self.dt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCoeffs {
    pub cx: Vec<f64>,
    pub cy: Vec<f64>,
}

impl TrajectoryCoeffs {
    pub fn zeros(n_coeffs: usize) -> Self {
        Self {
            cx: vec![0.0; n_coeffs],
            cy: vec![0.0; n_coeffs],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cx.iter().chain(&self.cy).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySamples {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub ddx: Vec<f64>,
    pub ddy: Vec<f64>,
}

impl TrajectorySamples {
    pub fn with_len(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            y: vec![0.0; n],
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            ddx: vec![0.0; n],
            ddy: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn check_lengths(&self) -> Result<(), TrajectoryError> {
        let n = self.x.len();
        for arr in [&self.y, &self.dx, &self.dy, &self.ddx, &self.ddy] {
            if arr.len() != n {
                return Err(TrajectoryError::Shape {
                    expected: n,
                    got: arr.len(),
                });
            }
        }
        Ok(())
    }
}

fn binomial_row(m: usize) -> Vec<f64> {
    let mut row = vec![1.0; m + 1];
    for i in 1..m {
        row[i] = row[i - 1] * (m - i + 1) as f64 / i as f64;
    }
    row
}

/// Bernstein basis values of degree `m` at `tau`. Returns `m + 1` entries.
pub fn bernstein(m: usize, tau: f64) -> Vec<f64> {
    let binom = binomial_row(m);
    (0..=m)
        .map(|i| binom[i] * tau.powi(i as i32) * (1.0 - tau).powi((m - i) as i32))
        .collect()
}

/// Precomputed evaluation matrices, `n_steps x (degree + 1)`.
#[derive(Clone, Debug)]
pub struct Basis {
    spec: BasisSpec,
    pos: DMatrix<f64>,
    vel: DMatrix<f64>,
    acc: DMatrix<f64>,
}

pub fn basis_matrices(spec: BasisSpec) -> Result<Basis, TrajectoryError> {
    Basis::new(spec)
}

impl Basis {
    pub fn new(spec: BasisSpec) -> Result<Self, TrajectoryError> {
        spec.validate()?;
        let m = spec.degree;
        let n = spec.n_steps;
        let horizon = spec.horizon();
        let mut pos = DMatrix::zeros(n, m + 1);
        let mut vel = DMatrix::zeros(n, m + 1);
        let mut acc = DMatrix::zeros(n, m + 1);
        for k in 0..n {
            let tau = k as f64 / (n - 1) as f64;
            let b0 = bernstein(m, tau);
            let b1 = bernstein(m - 1, tau);
            let b2 = bernstein(m - 2, tau);
            for i in 0..=m {
                pos[(k, i)] = b0[i];
                let lo = if i >= 1 { b1[i - 1] } else { 0.0 };
                let hi = if i <= m - 1 { b1[i] } else { 0.0 };
                vel[(k, i)] = m as f64 * (lo - hi) / horizon;
                let a = if i >= 2 { b2[i - 2] } else { 0.0 };
                let b = if (1..=m - 1).contains(&i) {
                    b2[i - 1]
                } else {
                    0.0
                };
                let c = if i <= m - 2 { b2[i] } else { 0.0 };
                acc[(k, i)] = (m * (m - 1)) as f64 * (a - 2.0 * b + c) / (horizon * horizon);
            }
        }
        Ok(Self {
            spec,
            pos,
            vel,
            acc,
        })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn pos(&self) -> &DMatrix<f64> {
        &self.pos
    }

    pub fn vel(&self) -> &DMatrix<f64> {
        &self.vel
    }

    pub fn acc(&self) -> &DMatrix<f64> {
        &self.acc
    }

    fn check_coeffs(&self, c: &[f64]) -> Result<(), TrajectoryError> {
        if c.len() != self.spec.n_coeffs() {
            return Err(TrajectoryError::Shape {
                expected: self.spec.n_coeffs(),
                got: c.len(),
            });
        }
        Ok(())
    }

    /// Evaluates one axis into position, velocity and acceleration series.
    pub fn evaluate_axis(&self, c: &[f64]) -> Result<[Vec<f64>; 3], TrajectoryError> {
        self.check_coeffs(c)?;
        let c = DVector::from_column_slice(c);
        Ok([
            (&self.pos * &c).as_slice().to_vec(),
            (&self.vel * &c).as_slice().to_vec(),
            (&self.acc * &c).as_slice().to_vec(),
        ])
    }

    pub fn evaluate(
        &self,
        coeffs: &TrajectoryCoeffs,
    ) -> Result<TrajectorySamples, TrajectoryError> {
        let [x, dx, ddx] = self.evaluate_axis(&coeffs.cx)?;
        let [y, dy, ddy] = self.evaluate_axis(&coeffs.cy)?;
        Ok(TrajectorySamples {
            x,
            y,
            dx,
            dy,
            ddx,
            ddy,
        })
    }

    /// Least-squares coefficients for one axis of position samples.
    pub fn fit_axis(&self, values: &[f64]) -> Result<Vec<f64>, TrajectoryError> {
        if values.len() != self.spec.n_steps {
            return Err(TrajectoryError::Shape {
                expected: self.spec.n_steps,
                got: values.len(),
            });
        }
        let qr = self.pos.clone().qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        let pivot = r
            .diagonal()
            .iter()
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
        if !(pivot > 1e-12 * scale) {
            return Err(TrajectoryError::RankDeficient { pivot });
        }
        let rhs = qr.q().transpose() * DVector::from_column_slice(values);
        let sol = r
            .solve_upper_triangular(&rhs)
            .ok_or(TrajectoryError::RankDeficient { pivot })?;
        Ok(sol.as_slice().to_vec())
    }

    /// Fits both axes from the position samples only.
    pub fn fit(&self, samples: &TrajectorySamples) -> Result<TrajectoryCoeffs, TrajectoryError> {
        samples.check_lengths()?;
        Ok(TrajectoryCoeffs {
            cx: self.fit_axis(&samples.x)?,
            cy: self.fit_axis(&samples.y)?,
        })
    }
}

pub fn evaluate(
    coeffs: &TrajectoryCoeffs,
    spec: BasisSpec,
) -> Result<TrajectorySamples, TrajectoryError> {
    Basis::new(spec)?.evaluate(coeffs)
}

pub fn fit(
    samples: &TrajectorySamples,
    spec: BasisSpec,
) -> Result<TrajectoryCoeffs, TrajectoryError> {
    Basis::new(spec)?.fit(samples)
}

/// Coefficients of a straight constant-velocity segment starting at `start`
/// with velocity `vel` (per axis) over the basis horizon.
pub fn constant_velocity(spec: &BasisSpec, start: [f64; 2], vel: [f64; 2]) -> TrajectoryCoeffs {
    let m = spec.degree as f64;
    let horizon = spec.horizon();
    let line = |p0: f64, v: f64| -> Vec<f64> {
        (0..=spec.degree)
            .map(|i| p0 + v * horizon * i as f64 / m)
            .collect()
    };
    TrajectoryCoeffs {
        cx: line(start[0], vel[0]),
        cy: line(start[1], vel[1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis() -> Basis {
        Basis::new(BasisSpec::default()).unwrap()
    }

    #[test]
    fn partition_of_unity() {
        let b = basis();
        for k in 0..b.spec().n_steps {
            let row_sum: f64 = b.pos().row(k).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_coeffs_are_stationary() {
        let b = basis();
        let [p, v, a] = b.evaluate_axis(&[2.5; 11]).unwrap();
        assert!(p.iter().all(|x| (x - 2.5).abs() < 1e-12));
        assert!(v.iter().all(|x| x.abs() < 1e-10));
        assert!(a.iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn derivative_matrices_match_finite_differences() {
        let b = basis();
        let spec = *b.spec();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c: Vec<f64> = (0..spec.n_coeffs())
            .map(|_| rng.gen_range(-5.0..5.0))
            .collect();
        let [_, v, a] = b.evaluate_axis(&c).unwrap();
        // independent evaluation of the polynomial at arbitrary times
        let p_at = |t: f64| -> f64 {
            bernstein(spec.degree, t / spec.horizon())
                .iter()
                .zip(&c)
                .map(|(w, ci)| w * ci)
                .sum()
        };
        let h = 1e-4;
        for k in 1..spec.n_steps - 1 {
            let t = k as f64 * spec.dt;
            let fd1 = (p_at(t + h) - p_at(t - h)) / (2.0 * h);
            let fd2 = (p_at(t + h) - 2.0 * p_at(t) + p_at(t - h)) / (h * h);
            let scale1 = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let scale2 = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!((fd1 - v[k]).abs() <= 1e-4 * scale1, "vel step {k}");
            assert!((fd2 - a[k]).abs() <= 1e-4 * scale2, "acc step {k}");
        }
    }

    #[test]
    fn endpoints_interpolate_first_and_last_coefficient() {
        let b = basis();
        let c: Vec<f64> = (0..11).map(|i| (i as f64).sin()).collect();
        let [p, _, _] = b.evaluate_axis(&c).unwrap();
        assert!((p[0] - c[0]).abs() < 1e-12);
        assert!((p[99] - c[10]).abs() < 1e-12);
    }

    #[test]
    fn linear_ramp_has_constant_velocity() {
        let spec = BasisSpec::default();
        let length = 30.0;
        let c: Vec<f64> = (0..=spec.degree)
            .map(|i| length * i as f64 / spec.degree as f64)
            .collect();
        let [_, v, a] = basis().evaluate_axis(&c).unwrap();
        let expected = length / spec.horizon();
        assert!(v.iter().all(|x| (x - expected).abs() < 1e-9));
        assert!(a.iter().all(|x| x.abs() < 1e-7));
    }

    #[test]
    fn zero_coeffs_zero_samples() {
        let s = basis().evaluate(&TrajectoryCoeffs::zeros(11)).unwrap();
        assert!(s.x.iter().chain(&s.ddy).all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let b = basis();
        assert!(matches!(
            b.evaluate(&TrajectoryCoeffs::zeros(5)),
            Err(TrajectoryError::Shape {
                expected: 11,
                got: 5
            })
        ));
        assert!(b.fit_axis(&[0.0; 10]).is_err());
        assert!(BasisSpec {
            degree: 2,
            n_steps: 10,
            dt: 0.1
        }
        .validate()
        .is_err());
        assert!(BasisSpec {
            degree: 10,
            n_steps: 10,
            dt: 0.1
        }
        .validate()
        .is_err());
        assert!(BasisSpec {
            degree: 10,
            n_steps: 20,
            dt: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn fit_constant_samples() {
        let c = basis().fit_axis(&[4.0; 100]).unwrap();
        assert!(c.iter().all(|v| (v - 4.0).abs() < 1e-9));
    }

    #[test]
    fn fit_is_least_squares_optimal() {
        let b = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy: Vec<f64> = (0..100)
            .map(|k| (k as f64 * 0.1).sin() + rng.gen_range(-0.2..0.2))
            .collect();
        let c = b.fit_axis(&noisy).unwrap();
        let residual = |coeffs: &[f64]| -> f64 {
            let [p, _, _] = b.evaluate_axis(coeffs).unwrap();
            p.iter().zip(&noisy).map(|(a, b)| (a - b).powi(2)).sum()
        };
        let best = residual(&c);
        for _ in 0..50 {
            let perturbed: Vec<f64> = c.iter().map(|v| v + rng.gen_range(-1e-3..1e-3)).collect();
            assert!(residual(&perturbed) >= best);
        }
    }

    proptest! {
        #[test]
        fn fit_inverts_evaluate(cx in proptest::collection::vec(-50.0f64..50.0, 11),
                                cy in proptest::collection::vec(-50.0f64..50.0, 11)) {
            let b = basis();
            let coeffs = TrajectoryCoeffs { cx, cy };
            let back = b.fit(&b.evaluate(&coeffs).unwrap()).unwrap();
            for (u, v) in back.cx.iter().zip(&coeffs.cx).chain(back.cy.iter().zip(&coeffs.cy)) {
                prop_assert!((u - v).abs() < 1e-8);
            }
        }

        #[test]
        fn evaluate_is_linear(a in proptest::collection::vec(-10.0f64..10.0, 11),
                              b in proptest::collection::vec(-10.0f64..10.0, 11)) {
            let basis = basis();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let [pa, va, aa] = basis.evaluate_axis(&a).unwrap();
            let [pb, vb, ab] = basis.evaluate_axis(&b).unwrap();
            let [ps, vs, as_] = basis.evaluate_axis(&sum).unwrap();
            for k in 0..100 {
                prop_assert!((ps[k] - pa[k] - pb[k]).abs() < 1e-9);
                prop_assert!((vs[k] - va[k] - vb[k]).abs() < 1e-8);
                prop_assert!((as_[k] - aa[k] - ab[k]).abs() < 1e-6);
            }
        }
    }
}
