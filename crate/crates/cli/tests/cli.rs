use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use driftnav_core::dtl;
use driftnav_core::lidar::{features_from_csv, ActivationMap, RangeImage};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_driftnav"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn baseline_on_an_empty_road_drives_the_run_length() {
    let dir = scratch("baseline");
    let o = run(&["run", "--scene", "empty", "--controller", "baseline", "--out", s(&dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.json", "timing.json", "simlog.csv", "trajectories.csv", "config.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let m = json(&dir.join("metrics.json"));
    assert!((m["drl_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert_eq!(m["collisions"], 0);
    let log = fs::read_to_string(dir.join("simlog.csv")).unwrap();
    assert!(log.starts_with("t,x,y,dx,dy,drift_increment,cumulative_drift"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = scratch("repeat-a");
    let b = scratch("repeat-b");
    for dir in [&a, &b] {
        let o = run(&["run", "--scene", "blocked-lane", "--seed", "3", "--n-samples", "200", "--out", s(dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["metrics.json", "simlog.csv", "trajectories.csv", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn malformed_scene_names_line_and_field() {
    let dir = scratch("malformed");
    let path = dir.join("bad.json");
    fs::write(&path, "{\n  \"schema_version\": 1,\n  \"scene\": {\n    \"road_width\": 7.0\n  }\n}\n").unwrap();
    let o = run(&["run", "--scene", s(&path), "--out", s(&dir.join("out"))]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("line 5") && err.contains("centerline"), "{err}");

    fs::write(&path, "{\"schema_version\": 9, \"scene\": {}}").unwrap();
    assert!(!run(&["run", "--scene", s(&path), "--out", s(&dir)]).status.success());

    let o = run(&["run", "--scene", "no-such-scene", "--out", s(&dir)]);
    assert!(!o.status.success() && stderr(&o).contains("stock scenes"));
}

#[test]
fn exported_scene_loads_back() {
    let dir = scratch("export");
    let path = dir.join("curve.json");
    assert!(run(&["export-scene", "curve", "--out", s(&path)]).status.success());
    assert_eq!(json(&path)["schema_version"], 1);
    let o = run(&["run", "--scene", s(&path), "--controller", "baseline", "--out", s(&dir.join("out"))]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn empty_feature_file_warns_and_runs() {
    let dir = scratch("empty-features");
    let features = dir.join("features.csv");
    fs::write(&features, "s,d,weight\n").unwrap();
    let o = run(&["run", "--scene", "feature-lane", "--features", s(&features), "--n-samples", "100", "--out", s(&dir.join("out"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
    // nothing pulls the plan off the centerline
    let log = fs::read_to_string(dir.join("out/simlog.csv")).unwrap();
    let max_y = log.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap().abs()).fold(0.0, f64::max);
    assert!(max_y < 0.05, "{max_y}");
}

#[test]
fn planning_failure_exits_nonzero_and_keeps_the_log() {
    let dir = scratch("failure");
    let scene = dir.join("wall.json");
    assert!(run(&["export-scene", "empty", "--out", s(&scene)]).status.success());
    let mut v = json(&scene);
    v["scene"]["obstacles"] = serde_json::json!([{"x": 100.0, "y": 0.0, "half_length": 2.0, "half_width": 300.0}]);
    fs::write(&scene, v.to_string()).unwrap();
    let out = dir.join("out");
    let o = run(&["run", "--scene", s(&scene), "--n-samples", "100", "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("partial log"), "{}", stderr(&o));
    let m = json(&out.join("metrics.json"));
    assert!(m["failure"].is_string());
    assert!(m["steps"].as_u64().unwrap() > 0);
    assert_eq!(fs::read_to_string(out.join("simlog.csv")).unwrap().lines().count() as u64, m["steps"].as_u64().unwrap() + 1);
}

#[test]
fn override_errors_are_reported() {
    let dir = scratch("override");
    let o = run(&["run", "--scene", "empty", "--override", "cem.bogus=1", "--out", s(&dir)]);
    assert!(!o.status.success() && stderr(&o).contains("cem.bogus"));
    let o = run(&["run", "--scene", "empty", "--horizon", "-1", "--out", s(&dir)]);
    assert!(!o.status.success());
}

#[test]
fn compare_rows_follow_config_order() {
    let dir = scratch("compare");
    let o = run(&["compare", "--scene", "asym-left", "--with", "baseline", "--with", "cem-mpc", "--with", "baseline", "--out", s(&dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("comparison.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!([rows[0][1], rows[1][1], rows[2][1]], ["baseline", "cem-mpc", "baseline"]);
    let ape = |r: &Vec<&str>| r[3].parse::<f64>().unwrap();
    let drl = |r: &Vec<&str>| r[4].parse::<f64>().unwrap();
    assert!(ape(&rows[1]) < ape(&rows[0]));
    assert!(drl(&rows[1]) >= drl(&rows[0]) - 1e-9);
    // identical configs reduce nothing
    assert_eq!(rows[0][6].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[2][6].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn compare_rejects_mismatched_scenes() {
    let dir = scratch("compare-mismatch");
    let a = dir.join("a.json");
    let b = dir.join("b.json");
    fs::write(&a, r#"{"scene": "asym-left", "controller": "baseline"}"#).unwrap();
    fs::write(&b, r#"{"scene": "asym-right", "controller": "cem-mpc"}"#).unwrap();
    let o = run(&["compare", "--config", s(&a), "--config", s(&b), "--out", s(&dir.join("out"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("mismatched scenes"), "{}", stderr(&o));
}

#[test]
fn dataset_counts_and_reproduces() {
    let a = scratch("dataset-a");
    let b = scratch("dataset-b");
    let scenes = "asym-left,asym-right,asym-curve,asym-sparse,feature-lane";
    for dir in [&a, &b] {
        let o = run(&["gen-dataset", "--scenes", scenes, "--offsets", "-2,0,2", "--poses", "20", "--spacing", "5", "--out", s(dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let index = fs::read_to_string(a.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 301);
    assert!(index.starts_with("scene_id,lateral_offset,drift_label"));
    assert_eq!(index, fs::read_to_string(b.join("index.csv")).unwrap());
    for line in index.lines().skip(1).step_by(37) {
        let file = line.rsplit(',').next().unwrap();
        let bytes = fs::read(a.join(file)).unwrap();
        assert_eq!(bytes, fs::read(b.join(file)).unwrap());
        assert_eq!(RangeImage::from_bytes(&bytes).unwrap().shape(), (1800, 16));
    }

    let o = run(&["gen-dataset", "--scenes", "asym-left", "--offsets", "0,1", "--out", s(&a)]);
    assert!(!o.status.success() && stderr(&o).contains("at least 3"));
}

#[test]
fn dtl_fixture_replays() {
    let dir = scratch("fixture");
    let path = dir.join("dtl.csv");
    assert!(run(&["dtl-fixture", "--seed", "4", "--count", "64", "--out", s(&path)]).status.success());
    let rows = dtl::fixture_from_csv(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(rows.len(), 64);
    for r in rows {
        let want = (r.triplet.z_n - r.triplet.z_p + r.params.beta).max(0.0)
            + r.params.lambda * ((r.triplet.z_a - r.triplet.z_n).powi(2) + (r.triplet.z_a - r.triplet.z_p).powi(2));
        assert_eq!(r.expected_loss, want);
    }
}

#[test]
fn extracted_features_feed_the_planner() {
    let dir = scratch("extract");
    let o = run(&["gen-dataset", "--scenes", "asym-left", "--offsets", "-1,0,1", "--poses", "1", "--out", s(&dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let index = fs::read_to_string(dir.join("index.csv")).unwrap();
    let row: Vec<&str> = index.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[1], "0");
    let image_path = dir.join(row[4]);
    let img = RangeImage::from_bytes(&fs::read(&image_path).unwrap()).unwrap();
    // an ideal learner: every return is a feature
    let act = ActivationMap::new(img.w, img.h, img.valid.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect()).unwrap();
    let act_path = dir.join("act.amap");
    fs::write(&act_path, act.to_bytes()).unwrap();
    let features = dir.join("features.csv");
    let o = run(&[
        "extract-features", "--activation", s(&act_path), "--image", s(&image_path), "--scene", "asym-left",
        "--s", row[3], "--d", "0", "--out", s(&features),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let anchors = features_from_csv(&fs::read_to_string(&features).unwrap()).unwrap();
    assert!(!anchors.is_empty());
    // the poles stand at d = 3; anchors sit on their near faces
    assert!(anchors.iter().all(|a| (a.d - 3.0).abs() < 0.5), "{anchors:?}");

    let o = run(&["run", "--scene", "asym-left", "--features", s(&features), "--controller", "baseline", "--out", s(&dir.join("out"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stderr(&o).contains("WARN"), "{}", stderr(&o));
}
