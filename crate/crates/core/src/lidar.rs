//! Spherical projection between point clouds and range images, a ray-cast
//! cloud generator, and the map from activation pixels back to road-frame
//! feature anchors.
//!
//! Image layout: column `x` encodes azimuth with `phi = pi` at column 0 and
//! the forward direction at column `w / 2`; row `y` encodes elevation with
//! `fov_up` at row 0. Grids are stored row by row (`y * w + x`).

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::LidarError;
use crate::frenet::Centerline;
use crate::problem::FeatureAnchor;

pub const RANGE_MAGIC: &[u8; 8] = b"RNGIMG01";
pub const ACTIVATION_MAGIC: &[u8; 8] = b"ACTMAP01";
/// Cell size of the feature clustering grid (m).
pub const CLUSTER_CELL: f64 = 2.0;
pub const DEFAULT_ACTIVATION_THRESHOLD: f64 = 0.6;
pub const POLE_RADIUS: f64 = 0.3;
pub const POLE_HEIGHT: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub w: usize,
    pub h: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub max_range: f64,
}

impl Default for LidarConfig {
    /// A 16-beam spinning sensor.
    fn default() -> Self {
        Self {
            w: 1800,
            h: 16,
            fov_up_deg: 15.0,
            fov_down_deg: -15.0,
            max_range: 100.0,
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<(), LidarError> {
        if self.w == 0 || self.h == 0 {
            return Err(LidarError::InvalidConfig("w and h must be >= 1".into()));
        }
        if !(self.fov_down_deg < self.fov_up_deg) || !(self.fov_up_deg.abs() <= 90.0) || !(self.fov_down_deg.abs() <= 90.0) {
            return Err(LidarError::InvalidConfig("need -90 <= fov_down < fov_up <= 90".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(LidarError::InvalidConfig("max_range must be > 0".into()));
        }
        Ok(())
    }

    fn fov_down(&self) -> f64 {
        self.fov_down_deg.to_radians()
    }

    fn fov_up(&self) -> f64 {
        self.fov_up_deg.to_radians()
    }

    fn fov_total(&self) -> f64 {
        self.fov_down().abs() + self.fov_up().abs()
    }

    /// Pixel of a direction, or `None` outside the vertical field of view.
    pub fn pixel_of(&self, phi: f64, theta: f64) -> Option<(usize, usize)> {
        if theta < self.fov_down() || theta > self.fov_up() {
            return None;
        }
        let x = (0.5 * (1.0 - phi / PI) * self.w as f64).floor();
        let y = ((1.0 - (theta + self.fov_down().abs()) / self.fov_total()) * self.h as f64).floor();
        let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64) as usize;
        Some((clamp(x, self.w), clamp(y, self.h)))
    }

    /// Azimuth and elevation through the centre of pixel `(x, y)`.
    pub fn pixel_direction(&self, x: usize, y: usize) -> (f64, f64) {
        let phi = PI * (1.0 - 2.0 * (x as f64 + 0.5) / self.w as f64);
        let theta = self.fov_total() * (1.0 - (y as f64 + 0.5) / self.h as f64) - self.fov_down().abs();
        (phi, theta)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

/// Range, azimuth in `(-pi, pi]` and elevation of a sensor-frame point.
pub fn spherical_decompose(p: [f64; 3]) -> Result<(f64, f64, f64), LidarError> {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if !r.is_finite() || r == 0.0 {
        return Err(LidarError::DegeneratePoint);
    }
    let mut phi = p[1].atan2(p[0]);
    if phi == -PI {
        phi = PI;
    }
    let theta = (p[2] / r).clamp(-1.0, 1.0).asin();
    Ok((r, phi, theta))
}

pub fn spherical_compose(r: f64, phi: f64, theta: f64) -> [f64; 3] {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [r * ct * cp, r * ct * sp, r * st]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub w: usize,
    pub h: usize,
    /// Range per pixel, `y * w + x`; zero where invalid.
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl RangeImage {
    pub fn empty(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            depth: vec![0.0; w * h],
            valid: vec![false; w * h],
        }
    }

    /// `(w, h)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.w, self.h)
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.w + x;
        self.valid[i].then(|| self.depth[i])
    }

    pub fn valid_pixels(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.h).flat_map(move |y| (0..self.w).filter_map(move |x| self.get(x, y).map(|d| (x, y, d))))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let values: Vec<f32> = self.depth.iter().map(|d| *d as f32).collect();
        grid_to_bytes(RANGE_MAGIC, self.w, self.h, &values)
    }

    /// Pixels with positive depth are valid.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LidarError> {
        let (w, h, values) = grid_from_bytes(RANGE_MAGIC, bytes)?;
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LidarError::Format("negative or non-finite range".into()));
        }
        Ok(Self {
            w,
            h,
            depth: values.iter().map(|v| *v as f64).collect(),
            valid: values.iter().map(|v| *v > 0.0).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub w: usize,
    pub h: usize,
    pub values: Vec<f64>,
}

impl ActivationMap {
    pub fn new(w: usize, h: usize, values: Vec<f64>) -> Result<Self, LidarError> {
        if values.len() != w * h {
            return Err(LidarError::DimensionMismatch(format!(
                "{} values for a {w}x{h} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(LidarError::Format("activation outside [0, 1]".into()));
        }
        Ok(Self { w, h, values })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let values: Vec<f32> = self.values.iter().map(|v| *v as f32).collect();
        grid_to_bytes(ACTIVATION_MAGIC, self.w, self.h, &values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LidarError> {
        let (w, h, values) = grid_from_bytes(ACTIVATION_MAGIC, bytes)?;
        Self::new(w, h, values.iter().map(|v| *v as f64).collect())
    }
}

fn grid_to_bytes(magic: &[u8; 8], w: usize, h: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn grid_from_bytes(magic: &[u8; 8], bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), LidarError> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(LidarError::Format(format!(
            "missing {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (w, h) = (word(8), word(12));
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(4)).map(|n| n + 16);
    if expected != Some(bytes.len()) {
        return Err(LidarError::Format(format!(
            "{w}x{h} grid needs {} bytes, file has {}",
            expected.map_or("too many".to_string(), |n| n.to_string()),
            bytes.len()
        )));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((w, h, values))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub image: RangeImage,
    /// Points outside the vertical field of view, beyond `max_range`, or at
    /// the sensor origin.
    pub dropped: usize,
}

/// Range image of a cloud; where points collide the nearest one wins.
pub fn project(cloud: &PointCloud, cfg: &LidarConfig) -> Result<Projection, LidarError> {
    cfg.validate()?;
    if cloud.points.is_empty() {
        return Err(LidarError::EmptyCloud);
    }
    let mut image = RangeImage::empty(cfg.w, cfg.h);
    let mut dropped = 0;
    for p in &cloud.points {
        let Ok((r, phi, theta)) = spherical_decompose(*p) else {
            dropped += 1;
            continue;
        };
        let Some((x, y)) = cfg.pixel_of(phi, theta).filter(|_| r <= cfg.max_range) else {
            dropped += 1;
            continue;
        };
        let i = y * cfg.w + x;
        if !image.valid[i] || r < image.depth[i] {
            image.depth[i] = r;
            image.valid[i] = true;
        }
    }
    Ok(Projection { image, dropped })
}

/// Sensor-frame point at `depth` through the centre of pixel `(x, y)`.
pub fn unproject(x: usize, y: usize, depth: f64, cfg: &LidarConfig) -> Result<[f64; 3], LidarError> {
    if x >= cfg.w || y >= cfg.h || !(depth > 0.0) || !depth.is_finite() {
        return Err(LidarError::InvalidPixel { x, y, depth });
    }
    let (phi, theta) = cfg.pixel_direction(x, y);
    Ok(spherical_compose(depth, phi, theta))
}

/// Sensor placement in the global frame: position, yaw and mounting height.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub height: f64,
}

pub const DEFAULT_SENSOR_HEIGHT: f64 = 1.73;

impl SensorPose {
    /// Sensor on the ego at road-frame `(s, d)`, aligned with the road.
    pub fn on_road(centerline: &Centerline, s: f64, d: f64) -> Result<Self, LidarError> {
        let p = centerline.frenet_to_global(crate::frenet::FrenetPose::new(s, d))?;
        Ok(Self {
            x: p[0],
            y: p[1],
            yaw: centerline.heading_at(s),
            height: DEFAULT_SENSOR_HEIGHT,
        })
    }

    pub fn to_global(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1], self.height + p[2]]
    }
}

/// Static scene geometry in the global frame, standing on the ground plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Structure {
    /// Vertical cylinder (pole, tree trunk) from the ground to `height`.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        height: f64,
    },
    /// Axis-aligned box (wall, building).
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Structure {
    /// Smallest positive ray parameter at which `o + t d` hits the surface.
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match self {
            Structure::Cylinder {
                center,
                radius,
                height,
            } => {
                let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
                let a = d[0] * d[0] + d[1] * d[1];
                if a == 0.0 {
                    return None;
                }
                let b = ox * d[0] + oy * d[1];
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - a * c;
                if c <= 0.0 || disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                let z = o[2] + t * d[2];
                (t > 0.0 && (0.0..=*height).contains(&z)).then_some(t)
            }
            Structure::Box { min, max } => {
                let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
                for k in 0..3 {
                    if d[k] == 0.0 {
                        if o[k] < min[k] || o[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((min[k] - o[k]) / d[k], (max[k] - o[k]) / d[k]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 > 0.0 && t0 <= t1).then_some(t0)
            }
        }
    }
}

/// One pole per feature anchor, standing at its road-frame position.
pub fn structures_from_features(features: &[FeatureAnchor], centerline: &Centerline) -> Result<Vec<Structure>, LidarError> {
    features
        .iter()
        .map(|f| {
            let p = centerline.frenet_to_global(crate::frenet::FrenetPose::new(f.s, f.d))?;
            Ok(Structure::Cylinder {
                center: p,
                radius: POLE_RADIUS,
                height: POLE_HEIGHT,
            })
        })
        .collect()
}

/// Casts one ray through every pixel centre and keeps the nearest hit
/// within `max_range`. Points are in the sensor frame, in pixel order.
pub fn cast(structures: &[Structure], pose: &SensorPose, cfg: &LidarConfig) -> Result<PointCloud, LidarError> {
    cfg.validate()?;
    let origin = [pose.x, pose.y, pose.height];
    let (sy, cy) = pose.yaw.sin_cos();
    let mut points = Vec::new();
    for y in 0..cfg.h {
        for x in 0..cfg.w {
            let (phi, theta) = cfg.pixel_direction(x, y);
            let local = spherical_compose(1.0, phi, theta);
            let dir = [cy * local[0] - sy * local[1], sy * local[0] + cy * local[1], local[2]];
            let nearest = structures
                .iter()
                .filter_map(|s| s.hit(origin, dir))
                .fold(f64::INFINITY, f64::min);
            if nearest <= cfg.max_range {
                points.push(spherical_compose(nearest, phi, theta));
            }
        }
    }
    Ok(PointCloud { points })
}

/// Cloud seen from `pose` with a pole at every feature of the scene.
pub fn synth_cloud(scene: &crate::sim::Scene, pose: &SensorPose, cfg: &LidarConfig) -> Result<PointCloud, LidarError> {
    let centerline = scene.centerline.build()?;
    let structures = structures_from_features(&scene.features, &centerline)?;
    cast(&structures, pose, cfg)
}

/// Feature anchors from the hot pixels of an activation map.
///
/// Pixels at or above `threshold` times the map's maximum (over valid
/// depth) are unprojected, moved to the global frame by `pose` and mapped
/// to the road frame. Occupied `CLUSTER_CELL` grid cells that touch,
/// including diagonally, form one cluster; each cluster becomes an anchor
/// at its mean `(s, d)` weighted by its mean activation.
pub fn activation_to_features(
    act: &ActivationMap,
    img: &RangeImage,
    cfg: &LidarConfig,
    pose: &SensorPose,
    threshold: f64,
    centerline: &Centerline,
) -> Result<Vec<FeatureAnchor>, LidarError> {
    if (act.w, act.h) != (img.w, img.h) || (img.w, img.h) != (cfg.w, cfg.h) {
        return Err(LidarError::DimensionMismatch(format!(
            "activation {}x{}, image {}x{}, config {}x{}",
            act.w, act.h, img.w, img.h, cfg.w, cfg.h
        )));
    }
    let peak = img
        .valid_pixels()
        .map(|(x, y, _)| act.values[y * act.w + x])
        .fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return Ok(Vec::new());
    }
    let cut = threshold * peak;
    let mut cells: BTreeMap<(i64, i64), Vec<(f64, f64, f64)>> = BTreeMap::new();
    for (x, y, depth) in img.valid_pixels() {
        let a = act.values[y * act.w + x];
        if a < cut {
            continue;
        }
        let g = pose.to_global(unproject(x, y, depth, cfg)?);
        let Ok(fp) = centerline.global_to_frenet([g[0], g[1]]) else {
            continue;
        };
        let key = ((fp.s / CLUSTER_CELL).floor() as i64, (fp.d / CLUSTER_CELL).floor() as i64);
        cells.entry(key).or_default().push((fp.s, fp.d, a));
    }

    let mut seen = BTreeSet::new();
    let mut anchors = Vec::new();
    for &start in cells.keys() {
        if !seen.insert(start) {
            continue;
        }
        let mut stack = vec![start];
        let (mut n, mut s, mut d, mut w) = (0usize, 0.0, 0.0, 0.0);
        while let Some(cell) = stack.pop() {
            for (ps, pd, pa) in &cells[&cell] {
                n += 1;
                s += ps;
                d += pd;
                w += pa;
            }
            for di in -1..=1 {
                for dj in -1..=1 {
                    let nb = (cell.0 + di, cell.1 + dj);
                    if cells.contains_key(&nb) && seen.insert(nb) {
                        stack.push(nb);
                    }
                }
            }
        }
        let k = n as f64;
        anchors.push(FeatureAnchor::new(s / k, d / k, w / k));
    }
    anchors.sort_by(|a, b| a.s.total_cmp(&b.s).then(a.d.total_cmp(&b.d)));
    Ok(anchors)
}

/// Feature anchors as CSV with header `s,d,weight`.
pub fn features_to_csv(features: &[FeatureAnchor]) -> String {
    let mut out = String::from("s,d,weight\n");
    for f in features {
        out.push_str(&format!("{},{},{}\n", f.s, f.d, f.weight));
    }
    out
}

/// Parses `s,d,weight` rows; a missing weight column defaults to 1. Errors
/// name the offending line.
pub fn features_from_csv(text: &str) -> Result<Vec<FeatureAnchor>, LidarError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('s')) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |k: usize| -> Result<f64, LidarError> {
            fields[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| LidarError::Format(format!("line {}: bad value {:?}", i + 1, fields[k])))
        };
        let weight = match fields.len() {
            2 => 1.0,
            3 => parse(2)?,
            n => {
                return Err(LidarError::Format(format!(
                    "line {}: expected 2 or 3 fields, got {n}",
                    i + 1
                )))
            }
        };
        out.push(FeatureAnchor::new(parse(0)?, parse(1)?, weight));
    }
    Ok(out)
}
