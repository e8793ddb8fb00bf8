//! Stock scenes used by the acceptance suite, the CLI and the examples.
//!
//! Roads are 7 m wide with the ego starting on the centerline at 10 m/s.
//! Obstacle sizes are given as half-extents; the planner inflates them by the
//! ego footprint and a margin.

use crate::problem::FeatureAnchor;
use crate::sim::{CenterlineSpec, Obstacle, Scene};

/// Feature anchors every `spacing` metres at lateral offset `d`, starting
/// at `s0` and covering `length` metres.
pub fn feature_row(s0: f64, length: f64, spacing: f64, d: f64, weight: f64) -> Vec<FeatureAnchor> {
    let count = (length / spacing).floor() as usize + 1;
    (0..count)
        .map(|i| FeatureAnchor::new(s0 + spacing * i as f64, d, weight))
        .collect()
}

pub fn empty_road(run_length: f64) -> Scene {
    Scene::straight(run_length)
}

/// Obstacle-free road with a dense row of features at offset `d`.
pub fn feature_lane(d: f64, run_length: f64) -> Scene {
    let mut scene = Scene::straight(run_length);
    scene.features = feature_row(0.0, run_length + 150.0, 4.0, d, 1.0);
    scene
}

fn parked(x: f64, y: f64) -> Obstacle {
    Obstacle {
        x,
        y,
        vx: 0.0,
        vy: 0.0,
        half_length: 2.25,
        half_width: 1.0,
    }
}

fn vehicle(x: f64, y: f64, vx: f64) -> Obstacle {
    Obstacle {
        vx,
        ..parked(x, y)
    }
}

/// A stopped vehicle blocks the ego lane 35 m ahead while the features run
/// along the right edge, so the good plans change lane to the right. A
/// straight-line initialization is pushed around the obstacle on the left
/// and stays there.
pub fn blocked_lane() -> Scene {
    let mut scene = Scene::straight(80.0);
    scene.obstacles = vec![parked(35.0, 0.0)];
    scene.features = feature_row(0.0, 230.0, 4.0, -3.0, 1.0);
    scene
}

/// Scenes where every feature sits on one side of the road. Features are
/// sparse, so driving the centerline sees only part of them.
pub fn asymmetric_set() -> Vec<(String, Scene)> {
    let mut out = Vec::new();

    let mut left = Scene::straight(150.0);
    left.features = feature_row(4.0, 300.0, 8.0, 3.0, 0.3);
    out.push(("asym-left".to_string(), left));

    let mut right = Scene::straight(150.0);
    right.features = feature_row(4.0, 300.0, 8.0, -3.0, 0.3);
    out.push(("asym-right".to_string(), right));

    let mut curve = Scene::straight(150.0);
    curve.centerline = CenterlineSpec::Arc {
        radius: 250.0,
        length: 350.0,
    };
    curve.features = feature_row(4.0, 300.0, 8.0, 2.5, 0.3);
    out.push(("asym-curve".to_string(), curve));

    let mut sparse = Scene::straight(150.0);
    sparse.features = feature_row(4.0, 300.0, 12.0, -2.5, 0.4);
    out.push(("asym-sparse".to_string(), sparse));

    out
}

/// Five obstacle scenes of increasing difficulty for constraint checks.
pub fn constraint_set() -> Vec<(String, Scene)> {
    let mut out = Vec::new();

    let mut one = Scene::straight(100.0);
    one.obstacles = vec![parked(30.0, 0.0)];
    out.push(("parked".to_string(), one));

    out.push(("two-obstacles".to_string(), two_obstacles()));

    let mut leader = Scene::straight(100.0);
    leader.obstacles = vec![vehicle(20.0, 0.0, 4.0), vehicle(90.0, 2.0, -6.0)];
    out.push(("slow-leader".to_string(), leader));

    let mut curve = Scene::straight(100.0);
    curve.centerline = CenterlineSpec::Arc {
        radius: -150.0,
        length: 300.0,
    };
    curve.obstacles = vec![parked(40.0, 0.5)];
    curve.features = feature_row(0.0, 250.0, 6.0, 2.5, 0.5);
    out.push(("curve".to_string(), curve));

    let mut crossing = Scene::straight(100.0);
    crossing.obstacles = vec![
        Obstacle {
            vy: 1.0,
            ..parked(40.0, -4.0)
        },
        parked(25.0, -2.5),
    ];
    crossing.features = feature_row(0.0, 250.0, 4.0, 3.0, 1.0);
    out.push(("crossing".to_string(), crossing));

    out
}

/// Two stopped vehicles in the ego lane, 30 m apart.
pub fn two_obstacles() -> Scene {
    let mut scene = Scene::straight(100.0);
    scene.obstacles = vec![parked(30.0, 0.0), parked(60.0, 0.0)];
    scene
}

/// Every stock scene by name.
pub fn by_name(name: &str) -> Option<Scene> {
    match name {
        "empty" => Some(empty_road(150.0)),
        "feature-lane" => Some(feature_lane(3.0, 150.0)),
        "blocked-lane" => Some(blocked_lane()),
        "two-obstacles" => Some(two_obstacles()),
        _ => asymmetric_set()
            .into_iter()
            .chain(constraint_set())
            .find(|(n, _)| n == name)
            .map(|(_, s)| s),
    }
}

pub fn names() -> Vec<String> {
    let mut names: Vec<String> = ["empty", "feature-lane", "blocked-lane", "two-obstacles"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend(asymmetric_set().into_iter().map(|(n, _)| n));
    names.extend(
        constraint_set()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n != "two-obstacles"),
    );
    names
}
