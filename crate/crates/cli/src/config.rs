//! Scene files, run configurations and `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use driftnav_core::lidar::features_from_csv;
use driftnav_core::scenes;
use driftnav_core::sim::{Controller, EpisodeConfig, PlannerConfig, Scene};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

/// On-disk scene: `{"schema_version": 1, "scene": {...}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub schema_version: u32,
    pub scene: Scene,
}

/// Loads a scene file, or a stock scene when no file of that name exists.
/// Returns a short id for the scene along with it.
pub fn load_scene(arg: &str) -> Result<(String, Scene)> {
    let path = Path::new(arg);
    if path.exists() {
        let text = fs::read_to_string(path).with_context(|| format!("reading scene file {arg}"))?;
        let file: SceneFile = serde_json::from_str(&text).map_err(|e| {
            anyhow!(
                "scene file {arg}: line {}, column {}: {e}",
                e.line(),
                e.column()
            )
        })?;
        if file.schema_version != SCHEMA_VERSION {
            bail!(
                "scene file {arg}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                file.schema_version
            );
        }
        file.scene.validate().with_context(|| format!("scene file {arg}"))?;
        let id = path.file_stem().map_or(arg.to_string(), |s| s.to_string_lossy().into_owned());
        return Ok((id, file.scene));
    }
    scenes::by_name(arg).map(|s| (arg.to_string(), s)).ok_or_else(|| {
        anyhow!(
            "no scene file {arg:?} and no stock scene of that name (stock scenes: {})",
            scenes::names().join(", ")
        )
    })
}

pub fn scene_file_json(scene: &Scene) -> String {
    let file = SceneFile {
        schema_version: SCHEMA_VERSION,
        scene: scene.clone(),
    };
    serde_json::to_string_pretty(&file).expect("scene serializes") + "\n"
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    CemMpc,
    Baseline,
}

/// One scenario run as given on the command line or in a compare file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Scene file path or stock scene name.
    pub scene: String,
    #[serde(default = "default_controller")]
    pub controller: ControllerKind,
    /// `scene-truth`, or a path to an `s,d,weight` CSV.
    #[serde(default = "scene_truth")]
    pub features: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub overrides: Vec<String>,
    /// Planning horizon (s).
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub n_samples: Option<usize>,
}

fn default_controller() -> ControllerKind {
    ControllerKind::CemMpc
}

pub fn scene_truth() -> String {
    "scene-truth".to_string()
}

/// Everything a run needs, after files are read and overrides applied.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub scene_id: String,
    pub scene: Scene,
    pub controller: Controller,
    pub episode: EpisodeConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn resolve(&self) -> Result<Resolved> {
        let (scene_id, mut scene) = load_scene(&self.scene)?;
        if self.features != scene_truth() {
            let path = PathBuf::from(&self.features);
            let text = fs::read_to_string(&path).with_context(|| format!("reading feature file {}", path.display()))?;
            scene.features =
                features_from_csv(&text).with_context(|| format!("feature file {}", path.display()))?;
            if scene.features.is_empty() {
                log::warn!(
                    "feature file {} is empty; the feature term has no effect",
                    path.display()
                );
            }
            scene.validate().with_context(|| format!("scene with features from {}", path.display()))?;
        }

        let mut planner = PlannerConfig::default();
        let mut episode = EpisodeConfig::default();
        apply_overrides(&mut planner, &mut episode, &self.overrides)?;
        planner.cem.seed = self.seed;
        if let Some(n) = self.n_samples {
            planner.cem.n_samples = n;
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0) || !h.is_finite() {
                bail!("--horizon must be a positive number of seconds, got {h}");
            }
            episode.basis.n_steps = (h / episode.basis.dt).round() as usize + 1;
        }
        episode.basis.validate().context("planning horizon")?;
        planner.cem.validate().context("CEM settings")?;

        let controller = match self.controller {
            ControllerKind::CemMpc => Controller::CemMpc(planner),
            ControllerKind::Baseline => Controller::Baseline,
        };
        Ok(Resolved {
            scene_id,
            scene,
            controller,
            episode,
            seed: self.seed,
        })
    }
}

/// Applies `path=value` overrides. Paths start with one of `cem`, `meta`,
/// `solver`, `weights` (planner settings), `drift`, `basis`, or the
/// episode fields `replan_steps` and `max_steps`. Values are JSON, with bare
/// words taken as strings.
pub fn apply_overrides(planner: &mut PlannerConfig, episode: &mut EpisodeConfig, overrides: &[String]) -> Result<()> {
    if overrides.is_empty() {
        return Ok(());
    }
    let mut root = serde_json::json!({
        "planner": planner,
        "episode": episode,
    });
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut parts = key.split('.');
        let first = parts.next().unwrap_or_default();
        let section = match first {
            "cem" | "meta" | "solver" | "weights" => "planner",
            "drift" | "basis" | "replan_steps" | "max_steps" => "episode",
            _ => bail!("unknown override key {key:?}"),
        };
        let mut slot = &mut root[section];
        for part in std::iter::once(first).chain(parts) {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| anyhow!("unknown override key {key:?}"))?;
        }
        *slot = value;
    }
    *planner = serde_json::from_value(root["planner"].take()).context("applying overrides")?;
    *episode = serde_json::from_value(root["episode"].take()).context("applying overrides")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let mut p = PlannerConfig::default();
        let mut e = EpisodeConfig::default();
        let o = ["cem.n_samples=200", "weights.w_feat=0.5", "drift.kernel_sigma=3", "replan_steps=5"].map(String::from);
        apply_overrides(&mut p, &mut e, &o).unwrap();
        assert_eq!(p.cem.n_samples, 200);
        assert_eq!(p.weights.w_feat, 0.5);
        assert_eq!(e.drift.kernel_sigma, 3.0);
        assert_eq!(e.replan_steps, 5);
    }

    #[test]
    fn bad_overrides_are_named() {
        let mut p = PlannerConfig::default();
        let mut e = EpisodeConfig::default();
        for bad in ["cem.n_sample=2", "nope=1", "cem.n_samples", "cem.n_samples=fast"] {
            let err = apply_overrides(&mut p, &mut e, &[bad.to_string()]).unwrap_err();
            assert!(format!("{err:#}").contains("override") || format!("{err:#}").contains("n_samples"), "{bad}: {err:#}");
        }
    }

    #[test]
    fn horizon_sets_the_step_count() {
        let cfg = RunConfig {
            scene: "empty".into(),
            controller: ControllerKind::Baseline,
            features: scene_truth(),
            seed: 0,
            overrides: vec![],
            horizon: Some(3.0),
            n_samples: None,
        };
        assert_eq!(cfg.resolve().unwrap().episode.basis.n_steps, 51);
    }

    #[test]
    fn scene_file_round_trip() {
        let scene = scenes::blocked_lane();
        let file: SceneFile = serde_json::from_str(&scene_file_json(&scene)).unwrap();
        assert_eq!(file.scene, scene);
    }
}
