//! Road centerline and the global <-> Frenet (s, d) transforms.
//!
//! The centerline is a polyline with cumulative arc lengths. Lateral offset
//! `d` is positive to the left of the direction of travel.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Maximum lateral distance from the centerline accepted by [`Centerline::global_to_frenet`].
pub const LATERAL_CAPTURE_BAND: f64 = 50.0;

/// Speed floor below which curvature is considered singular.
pub const CURVATURE_SPEED_EPS: f64 = 1e-9;

/// Heading relative to the centerline above which the axis-aligned ellipse
/// model gets conservative. Exceeding it is only reported, never enforced.
pub const HEADING_WARN_DEG: f64 = 13.0;

const EXTENT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrenetPose {
    pub s: f64,
    pub d: f64,
}

impl FrenetPose {
    pub fn new(s: f64, d: f64) -> Self {
        Self { s, d }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Centerline {
    waypoints: Vec<[f64; 2]>,
    arc_lengths: Vec<f64>,
}

impl Centerline {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Result<Self, GeometryError> {
        if waypoints.len() < 2 {
            return Err(GeometryError::TooFewWaypoints(waypoints.len()));
        }
        let mut arc_lengths = Vec::with_capacity(waypoints.len());
        arc_lengths.push(0.0);
        for (i, pair) in waypoints.windows(2).enumerate() {
            let [a, b] = [pair[0], pair[1]];
            if !(a[0].is_finite() && a[1].is_finite() && b[0].is_finite() && b[1].is_finite()) {
                return Err(GeometryError::NonFinite);
            }
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if len <= 0.0 {
                return Err(GeometryError::DuplicateWaypoint(i + 1));
            }
            arc_lengths.push(arc_lengths[i] + len);
        }
        Ok(Self {
            waypoints,
            arc_lengths,
        })
    }

    /// Straight centerline starting at `start` with the given heading (radians).
    pub fn straight(start: [f64; 2], heading: f64, length: f64) -> Result<Self, GeometryError> {
        let end = [
            start[0] + length * heading.cos(),
            start[1] + length * heading.sin(),
        ];
        Self::new(vec![start, end])
    }

    /// Circular arc around `center`. Positive `sweep` travels counterclockwise,
    /// i.e. the center lies on the left (positive d) side.
    pub fn arc(
        center: [f64; 2],
        radius: f64,
        start_angle: f64,
        sweep: f64,
        segments: usize,
    ) -> Result<Self, GeometryError> {
        let segments = segments.max(1);
        let waypoints = (0..=segments)
            .map(|i| {
                let a = start_angle + sweep * i as f64 / segments as f64;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            })
            .collect();
        Self::new(waypoints)
    }

    pub fn waypoints(&self) -> &[[f64; 2]] {
        &self.waypoints
    }

    pub fn arc_lengths(&self) -> &[f64] {
        &self.arc_lengths
    }

    pub fn length(&self) -> f64 {
        *self.arc_lengths.last().unwrap()
    }

    fn segment_frame(&self, i: usize) -> ([f64; 2], [f64; 2], f64) {
        let a = self.waypoints[i];
        let b = self.waypoints[i + 1];
        let len = self.arc_lengths[i + 1] - self.arc_lengths[i];
        (a, [(b[0] - a[0]) / len, (b[1] - a[1]) / len], len)
    }

    fn segment_at(&self, s: f64) -> usize {
        let idx = self.arc_lengths.partition_point(|&x| x <= s);
        idx.saturating_sub(1).min(self.waypoints.len() - 2)
    }

    /// Unit tangent heading (radians) of the segment containing `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let (_, u, _) = self.segment_frame(self.segment_at(s));
        u[1].atan2(u[0])
    }

    pub fn global_to_frenet(&self, p: [f64; 2]) -> Result<FrenetPose, GeometryError> {
        let last = self.waypoints.len() - 2;
        let mut best: Option<(f64, FrenetPose, f64)> = None;
        for i in 0..=last {
            let (a, u, len) = self.segment_frame(i);
            let rel = [p[0] - a[0], p[1] - a[1]];
            let along = rel[0] * u[0] + rel[1] * u[1];
            let lateral = u[0] * rel[1] - u[1] * rel[0];
            let clamped = along.clamp(0.0, len);
            let dist2 = (along - clamped).powi(2) + lateral.powi(2);
            let overshoot = if i == 0 && along < 0.0 {
                -along
            } else if i == last && along > len {
                along - len
            } else {
                0.0
            };
            if best.as_ref().map_or(true, |(d2, _, _)| dist2 < *d2) {
                let d = if clamped == along {
                    lateral
                } else {
                    lateral.signum() * dist2.sqrt()
                };
                best = Some((
                    dist2,
                    FrenetPose::new(self.arc_lengths[i] + clamped, d),
                    overshoot,
                ));
            }
        }
        let (_, pose, overshoot) = best.expect("centerline has at least one segment");
        if overshoot > EXTENT_TOL || pose.d.abs() > LATERAL_CAPTURE_BAND {
            return Err(GeometryError::OutOfRange {
                s: pose.s,
                d: pose.d,
                length: self.length(),
            });
        }
        Ok(pose)
    }

    pub fn frenet_to_global(&self, fp: FrenetPose) -> Result<[f64; 2], GeometryError> {
        let length = self.length();
        if !(fp.s >= -EXTENT_TOL && fp.s <= length + EXTENT_TOL) || !fp.d.is_finite() {
            return Err(GeometryError::OutOfRange {
                s: fp.s,
                d: fp.d,
                length,
            });
        }
        let i = self.segment_at(fp.s);
        let (a, u, _) = self.segment_frame(i);
        let ds = fp.s - self.arc_lengths[i];
        Ok([
            a[0] + ds * u[0] - fp.d * u[1],
            a[1] + ds * u[1] + fp.d * u[0],
        ])
    }

    /// Rotates a Frenet-frame vector (along, lateral) at arc length `s` into the global frame.
    pub fn frenet_vector_to_global(&self, s: f64, v: [f64; 2]) -> [f64; 2] {
        let (_, u, _) = self.segment_frame(self.segment_at(s));
        [v[0] * u[0] - v[1] * u[1], v[0] * u[1] + v[1] * u[0]]
    }

    /// Rotates a global vector into the Frenet frame at arc length `s`.
    pub fn global_vector_to_frenet(&self, s: f64, v: [f64; 2]) -> [f64; 2] {
        let (_, u, _) = self.segment_frame(self.segment_at(s));
        [v[0] * u[0] + v[1] * u[1], u[0] * v[1] - u[1] * v[0]]
    }
}

/// Signed curvature per step, `(dx*ddy - dy*ddx) / (dx^2 + dy^2)^(3/2)`.
pub fn curvature(
    dx: &[f64],
    dy: &[f64],
    ddx: &[f64],
    ddy: &[f64],
) -> Result<Vec<f64>, GeometryError> {
    let n = dx.len();
    if dy.len() != n || ddx.len() != n || ddy.len() != n {
        return Err(GeometryError::LengthMismatch);
    }
    (0..n)
        .map(|t| {
            let speed2 = dx[t] * dx[t] + dy[t] * dy[t];
            if !(speed2 > CURVATURE_SPEED_EPS) {
                return Err(GeometryError::SingularCurvature { step: t });
            }
            Ok((dx[t] * ddy[t] - dy[t] * ddx[t]) / (speed2 * speed2.sqrt()))
        })
        .collect()
}

/// Largest absolute heading (degrees) of a velocity series relative to the +s axis.
pub fn max_heading_deg(dx: &[f64], dy: &[f64]) -> f64 {
    dx.iter()
        .zip(dy)
        .filter(|(x, y)| x.hypot(**y) > CURVATURE_SPEED_EPS)
        .map(|(x, y)| y.atan2(*x).abs().to_degrees())
        .fold(0.0, f64::max)
}
