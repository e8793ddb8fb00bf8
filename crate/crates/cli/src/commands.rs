use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use driftnav_core::dataset::{self, DatasetConfig};
use driftnav_core::dtl;
use driftnav_core::lidar::{self, ActivationMap, LidarConfig, RangeImage, SensorPose};
use driftnav_core::scenes;
use driftnav_core::sim::{metrics, plan_from_start, run_episode, PlannerConfig, SimLog};
use driftnav_core::trajectory::BasisSpec;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{load_scene, Resolved, RunConfig};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Deterministic outcome of a run; identical configs give identical files.
#[derive(Clone, Debug, Serialize)]
pub struct RunMetrics {
    pub scene: String,
    pub controller: String,
    pub seed: u64,
    pub ape_proxy: Option<f64>,
    pub drl_ratio: Option<f64>,
    pub collisions: usize,
    pub steps: usize,
    pub plans: usize,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyStats {
    pub plans: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
    pub max_s: f64,
}

pub fn latency_stats(latency: &[f64]) -> LatencyStats {
    let mut v = latency.to_vec();
    v.sort_by(f64::total_cmp);
    let pick = |q: f64| {
        if v.is_empty() {
            0.0
        } else {
            v[((v.len() - 1) as f64 * q).round() as usize]
        }
    };
    LatencyStats {
        plans: v.len(),
        mean_s: if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 },
        median_s: pick(0.5),
        p95_s: pick(0.95),
        max_s: v.last().copied().unwrap_or(0.0),
    }
}

pub fn trajectories_csv(log: &SimLog, dt: f64) -> String {
    let mut out = String::from("plan_id,k,t,x,y,dx,dy,ddx,ddy,meta_cost\n");
    for p in &log.plans {
        let s = &p.samples;
        let meta = p.meta_cost.map_or(String::new(), |m| m.to_string());
        for k in 0..s.x.len() {
            let _ = writeln!(
                out,
                "{},{k},{},{},{},{},{},{},{},{meta}",
                p.id,
                p.t + k as f64 * dt,
                s.x[k],
                s.y[k],
                s.dx[k],
                s.dy[k],
                s.ddx[k],
                s.ddy[k]
            );
        }
    }
    out
}

pub struct RunOutput {
    pub metrics: RunMetrics,
    pub log: SimLog,
}

/// Runs one scenario and writes `simlog.csv`, `trajectories.csv`,
/// `metrics.json`, `timing.json` and `config.json` into `out`. A planning
/// failure still writes every artifact, then returns an error.
pub fn run_scenario(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    let r = cfg.resolve()?;
    run_resolved(&r, out)
}

fn run_resolved(r: &Resolved, out: &Path) -> Result<RunOutput> {
    create_dir(out)?;
    let log = run_episode(&r.scene, &r.controller, &r.episode)
        .with_context(|| format!("running scene {}", r.scene_id))?;
    let m = metrics(&log, &r.scene).ok();
    let summary = RunMetrics {
        scene: r.scene_id.clone(),
        controller: r.controller.name().to_string(),
        seed: r.seed,
        ape_proxy: m.map(|m| m.ape_proxy),
        drl_ratio: m.map(|m| m.drl_ratio),
        collisions: log.collisions.len(),
        steps: log.rows.len(),
        plans: log.plans.len(),
        failure: log.failure.clone(),
    };
    write(&out.join("simlog.csv"), log.to_csv())?;
    write(&out.join("trajectories.csv"), trajectories_csv(&log, r.episode.basis.dt))?;
    write(&out.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    write(&out.join("timing.json"), serde_json::to_string_pretty(&latency_stats(&log.plan_latency))? + "\n")?;
    write(&out.join("config.json"), serde_json::to_string_pretty(r)? + "\n")?;
    if let Some(f) = &log.failure {
        bail!("{f}; partial log written to {}", out.display());
    }
    Ok(RunOutput { metrics: summary, log })
}

/// Runs every config on the same scene and writes `comparison.csv` with a
/// row per config, in config order. Each run's artifacts go to
/// `out/run<i>-<controller>`.
pub fn compare(configs: &[RunConfig], out: &Path) -> Result<String> {
    if configs.len() < 2 {
        bail!("compare needs at least 2 configs, got {}", configs.len());
    }
    let resolved = configs.iter().map(RunConfig::resolve).collect::<Result<Vec<_>>>()?;
    for r in &resolved[1..] {
        if r.scene != resolved[0].scene {
            bail!(
                "mismatched scenes: {} and {} differ",
                resolved[0].scene_id,
                r.scene_id
            );
        }
    }
    create_dir(out)?;
    let runs = resolved
        .par_iter()
        .enumerate()
        .map(|(i, r)| run_resolved(r, &out.join(format!("run{i}-{}", r.controller.name()))))
        .collect::<Result<Vec<_>>>()?;
    let first = runs[0].metrics.ape_proxy.unwrap_or(f64::NAN);
    let mut csv = String::from("run,controller,seed,ape_proxy,drl_ratio,collisions,drift_reduction_pct\n");
    for (i, run) in runs.iter().enumerate() {
        let m = &run.metrics;
        let ape = m.ape_proxy.unwrap_or(f64::NAN);
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{}",
            m.controller,
            m.seed,
            ape,
            m.drl_ratio.unwrap_or(f64::NAN),
            m.collisions,
            100.0 * (first - ape) / first
        );
    }
    write(&out.join("comparison.csv"), &csv)?;
    Ok(csv)
}

pub struct DatasetArgs {
    pub scenes: Vec<String>,
    pub offsets: Vec<f64>,
    pub poses: usize,
    pub spacing: f64,
}

/// Writes one `.rimg` per sample and `index.csv` into `out`.
pub fn gen_dataset(args: &DatasetArgs, out: &Path) -> Result<usize> {
    let scenes = args.scenes.iter().map(|s| load_scene(s)).collect::<Result<Vec<_>>>()?;
    let cfg = DatasetConfig {
        offsets: args.offsets.clone(),
        poses_per_offset: args.poses,
        pose_spacing: args.spacing,
        ..Default::default()
    };
    let samples = dataset::build(&scenes, &cfg)?;
    dataset::write(out, &samples)?;
    Ok(samples.len())
}

pub fn dtl_fixture(seed: u64, count: usize, out: &Path) -> Result<()> {
    write(out, dtl::fixture_to_csv(&dtl::fixture(seed, count)))
}

pub struct ExtractArgs {
    pub activation: PathBuf,
    pub image: PathBuf,
    pub scene: String,
    pub s: f64,
    pub d: f64,
    pub threshold: f64,
}

/// Turns a learned activation map into a feature CSV for the planner.
pub fn extract_features(args: &ExtractArgs, out: &Path) -> Result<usize> {
    let read = |p: &Path| fs::read(p).with_context(|| format!("reading {}", p.display()));
    let act = ActivationMap::from_bytes(&read(&args.activation)?)
        .with_context(|| format!("activation map {}", args.activation.display()))?;
    let img = RangeImage::from_bytes(&read(&args.image)?)
        .with_context(|| format!("range image {}", args.image.display()))?;
    let (_, scene) = load_scene(&args.scene)?;
    let centerline = scene.validate()?;
    let cfg = LidarConfig {
        w: img.w,
        h: img.h,
        ..Default::default()
    };
    let pose = SensorPose::on_road(&centerline, args.s, args.d)?;
    let anchors = lidar::activation_to_features(&act, &img, &cfg, &pose, args.threshold, &centerline)?;
    write(out, lidar::features_to_csv(&anchors))?;
    Ok(anchors.len())
}

/// Times `runs` seeded plans (after one warm-up) on the two-obstacle scene.
pub fn bench(runs: usize, n_samples: usize) -> Result<String> {
    if runs == 0 {
        bail!("--runs must be >= 1");
    }
    let scene = scenes::two_obstacles();
    let basis = BasisSpec::default();
    let mut pc = PlannerConfig::default();
    pc.cem.n_samples = n_samples;
    pc.cem.validate()?;
    plan_from_start(&scene, &pc, basis)?;
    let mut times = Vec::with_capacity(runs);
    for seed in 0..runs as u64 {
        pc.cem.seed = seed;
        let t = Instant::now();
        plan_from_start(&scene, &pc, basis)?;
        times.push(t.elapsed().as_secs_f64());
    }
    let stats = latency_stats(&times);
    let mut report = String::new();
    let _ = writeln!(
        report,
        "plan benchmark: n_samples {}, cem_iters {}, steps {}, obstacles {}",
        pc.cem.n_samples,
        pc.cem.cem_iters,
        basis.n_steps,
        scene.obstacles.len()
    );
    let _ = writeln!(
        report,
        "available cores {}, rayon threads {}",
        std::thread::available_parallelism().map_or(1, |n| n.get()),
        rayon::current_num_threads()
    );
    let _ = writeln!(report, "runs (s): {}", times.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join(" "));
    let _ = writeln!(
        report,
        "median {:.3} s, mean {:.3} s, max {:.3} s",
        stats.median_s, stats.mean_s, stats.max_s
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_stats_cases() {
        let s = latency_stats(&[0.3, 0.1, 0.2]);
        assert_eq!((s.plans, s.median_s, s.max_s), (3, 0.2, 0.3));
        assert!((s.mean_s - 0.2).abs() < 1e-12);
        assert_eq!(latency_stats(&[]).plans, 0);
    }
}
