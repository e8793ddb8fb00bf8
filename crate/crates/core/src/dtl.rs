//! Directional triplet ranking loss on scalar drift scores.
//!
//! For an anchor score `z_a`, a positive `z_p` (less drift) and a negative
//! `z_n` (more drift):
//!
//! `L = max(0, z_n - z_p + beta) + lambda * ((z_a - z_n)^2 + (z_a - z_p)^2)`
//!
//! The hinge ranks the positive above the negative by a margin `beta`; the
//! quadratic term keeps both near the anchor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DtlError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtlParams {
    pub beta: f64,
    pub lambda: f64,
}

impl Default for DtlParams {
    fn default() -> Self {
        Self { beta: 1.0, lambda: 0.1 }
    }
}

impl DtlParams {
    pub fn new(beta: f64, lambda: f64) -> Result<Self, DtlError> {
        let p = Self { beta, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DtlError> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(DtlError::InvalidParams(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(DtlError::InvalidParams(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Scores of one triplet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub z_p: f64,
    pub z_a: f64,
    pub z_n: f64,
}

/// Partial derivatives with respect to each score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletGrad {
    pub d_p: f64,
    pub d_a: f64,
    pub d_n: f64,
}

fn check(t: &Triplet) -> Result<(), DtlError> {
    if t.z_p.is_finite() && t.z_a.is_finite() && t.z_n.is_finite() {
        Ok(())
    } else {
        Err(DtlError::NonFinite)
    }
}

pub fn loss(t: &Triplet, p: &DtlParams) -> Result<f64, DtlError> {
    check(t)?;
    let hinge = (t.z_n - t.z_p + p.beta).max(0.0);
    Ok(hinge + p.lambda * ((t.z_a - t.z_n).powi(2) + (t.z_a - t.z_p).powi(2)))
}

/// Gradient of [`loss`]. On the hinge kink (`z_n - z_p + beta == 0`) the
/// zero subgradient is used.
pub fn gradient(t: &Triplet, p: &DtlParams) -> Result<TripletGrad, DtlError> {
    check(t)?;
    let h = if t.z_n - t.z_p + p.beta > 0.0 { 1.0 } else { 0.0 };
    let l2 = 2.0 * p.lambda;
    Ok(TripletGrad {
        d_p: -h + l2 * (t.z_p - t.z_a),
        d_a: l2 * (2.0 * t.z_a - t.z_n - t.z_p),
        d_n: h + l2 * (t.z_n - t.z_a),
    })
}

/// Mean loss over a batch.
pub fn batch_loss(batch: &[Triplet], p: &DtlParams) -> Result<f64, DtlError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in batch {
        sum += loss(t, p)?;
    }
    Ok(sum / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixtureRow {
    pub triplet: Triplet,
    pub params: DtlParams,
    pub expected_loss: f64,
}

/// Seeded parity rows with a few hand-placed edge cases (kink, degenerate
/// triplet, zero lambda) ahead of the random ones.
pub fn fixture(seed: u64, count: usize) -> Vec<FixtureRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<(Triplet, DtlParams)> = vec![
        (Triplet { z_p: 0.0, z_a: 0.0, z_n: 0.0 }, DtlParams { beta: 1.0, lambda: 0.5 }),
        (Triplet { z_p: 2.0, z_a: 1.5, z_n: 1.0 }, DtlParams { beta: 1.0, lambda: 0.5 }),
        (Triplet { z_p: 0.3, z_a: -1.0, z_n: 2.0 }, DtlParams { beta: 0.2, lambda: 0.0 }),
    ];
    while rows.len() < count {
        let t = Triplet {
            z_p: rng.gen_range(-3.0..3.0),
            z_a: rng.gen_range(-3.0..3.0),
            z_n: rng.gen_range(-3.0..3.0),
        };
        let p = DtlParams {
            beta: rng.gen_range(0.05..2.0),
            lambda: rng.gen_range(0.0..1.0),
        };
        rows.push((t, p));
    }
    rows.truncate(count);
    rows.into_iter()
        .map(|(triplet, params)| FixtureRow {
            triplet,
            params,
            expected_loss: loss(&triplet, &params).expect("finite by construction"),
        })
        .collect()
}

/// CSV with header `z_p,z_a,z_n,beta,lambda,expected_loss`; values use the
/// shortest representation that parses back to the same f64.
pub fn fixture_to_csv(rows: &[FixtureRow]) -> String {
    let mut out = String::from("z_p,z_a,z_n,beta,lambda,expected_loss\n");
    for r in rows {
        let t = r.triplet;
        out.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?},{:?}\n",
            t.z_p, t.z_a, t.z_n, r.params.beta, r.params.lambda, r.expected_loss
        ));
    }
    out
}

pub fn fixture_from_csv(text: &str) -> Result<Vec<FixtureRow>, DtlError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("z_p")) {
            continue;
        }
        let err = |message: String| DtlError::Fixture { line: i + 1, message };
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 6 {
            return Err(err(format!("expected 6 fields, got {}", v.len())));
        }
        let params = DtlParams::new(v[3], v[4]).map_err(|e| err(e.to_string()))?;
        rows.push(FixtureRow {
            triplet: Triplet { z_p: v[0], z_a: v[1], z_n: v[2] },
            params,
            expected_loss: v[5],
        });
    }
    Ok(rows)
}
