//! Training samples for the feature learner: range images taken at several
//! lateral offsets along each road, each labelled with the drift proxy at
//! that pose.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DatasetError;
use crate::lidar::{project, synth_cloud, LidarConfig, RangeImage, SensorPose};
use crate::sim::{drift_increment, DriftModel, EgoState, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Lateral offsets to sample; at least three so the learner sees a
    /// spread of drift labels per road.
    pub offsets: Vec<f64>,
    pub poses_per_offset: usize,
    pub start_s: f64,
    pub pose_spacing: f64,
    pub lidar: LidarConfig,
    pub drift: DriftModel,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            offsets: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            poses_per_offset: 10,
            start_s: 5.0,
            pose_spacing: 10.0,
            lidar: LidarConfig::default(),
            drift: DriftModel::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.offsets.len() < 3 {
            return Err(DatasetError::InvalidConfig(format!(
                "need at least 3 lateral offsets, got {}",
                self.offsets.len()
            )));
        }
        if self.offsets.iter().any(|o| !o.is_finite()) || self.poses_per_offset == 0 || !(self.pose_spacing > 0.0) {
            return Err(DatasetError::InvalidConfig(
                "offsets must be finite, poses_per_offset >= 1 and pose_spacing > 0".into(),
            ));
        }
        self.lidar.validate()?;
        self.drift.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub scene_id: String,
    pub lateral_offset: f64,
    pub s: f64,
    pub drift_label: f64,
    /// Image file name relative to the dataset directory.
    pub file: String,
}

/// One sample per scene, offset and pose, in that nesting order. Poses that
/// see nothing give an all-invalid image.
pub fn build(scenes: &[(String, Scene)], cfg: &DatasetConfig) -> Result<Vec<(DatasetEntry, RangeImage)>, DatasetError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (scene_id, scene) in scenes {
        let centerline = scene.validate()?;
        for (oi, &offset) in cfg.offsets.iter().enumerate() {
            for k in 0..cfg.poses_per_offset {
                let s = cfg.start_s + cfg.pose_spacing * k as f64;
                let pose = SensorPose::on_road(&centerline, s, offset)?;
                let cloud = synth_cloud(scene, &pose, &cfg.lidar)?;
                let image = if cloud.points.is_empty() {
                    RangeImage::empty(cfg.lidar.w, cfg.lidar.h)
                } else {
                    project(&cloud, &cfg.lidar)?.image
                };
                let ego = EgoState {
                    x: s,
                    y: offset,
                    ..Default::default()
                };
                out.push((
                    DatasetEntry {
                        scene_id: scene_id.clone(),
                        lateral_offset: offset,
                        s,
                        drift_label: drift_increment(&ego, &scene.features, &cfg.drift),
                        file: format!("{scene_id}_o{oi}_p{k:03}.rimg"),
                    },
                    image,
                ));
            }
        }
    }
    Ok(out)
}

pub fn index_csv(entries: &[DatasetEntry]) -> String {
    let mut out = String::from("scene_id,lateral_offset,drift_label,s,file\n");
    for e in entries {
        out.push_str(&format!("{},{},{},{},{}\n", e.scene_id, e.lateral_offset, e.drift_label, e.s, e.file));
    }
    out
}

/// Writes every image plus `index.csv` into `dir`, creating it if needed.
pub fn write(dir: &Path, samples: &[(DatasetEntry, RangeImage)]) -> Result<(), DatasetError> {
    let io = |path: &Path, e: std::io::Error| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (entry, image) in samples {
        let path = dir.join(&entry.file);
        fs::write(&path, image.to_bytes()).map_err(|e| io(&path, e))?;
    }
    let entries: Vec<DatasetEntry> = samples.iter().map(|(e, _)| e.clone()).collect();
    let path = dir.join("index.csv");
    fs::write(&path, index_csv(&entries)).map_err(|e| io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::feature_lane;

    fn small() -> DatasetConfig {
        DatasetConfig {
            offsets: vec![-1.0, 1.0, 2.0, 3.0],
            poses_per_offset: 2,
            ..Default::default()
        }
    }

    #[test]
    fn too_few_offsets_is_an_error() {
        let cfg = DatasetConfig {
            offsets: vec![0.0, 1.0],
            ..Default::default()
        };
        assert!(matches!(build(&[], &cfg), Err(DatasetError::InvalidConfig(_))));
    }

    #[test]
    fn labels_fall_toward_the_features() {
        let scene = crate::scenes::by_name("asym-left").unwrap();
        let cfg = DatasetConfig {
            offsets: vec![-3.0, 0.0, 1.5, 3.0],
            ..small()
        };
        let samples = build(&[("left".to_string(), scene)], &cfg).unwrap();
        assert_eq!(samples.len(), 8);
        let at = |o: f64| samples.iter().find(|(e, _)| e.lateral_offset == o && e.s == 5.0).unwrap().0.drift_label;
        // non-increasing toward the row; dense rows saturate near it
        assert!(at(-3.0) > at(0.0) && at(0.0) > at(1.5) && at(1.5) >= at(3.0));
        // the poles are visible
        assert!(samples.iter().all(|(_, img)| img.valid.iter().any(|v| *v)));
    }

    #[test]
    fn rebuild_is_identical() {
        let scenes = [("lane".to_string(), feature_lane(-3.0, 60.0))];
        let a = build(&scenes, &small()).unwrap();
        let b = build(&scenes, &small()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.to_bytes() == y.1.to_bytes()));
        let csv = index_csv(&a.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
        assert!(csv.starts_with("scene_id,lateral_offset,drift_label"));
        assert_eq!(csv.lines().count(), 9);
    }
}
