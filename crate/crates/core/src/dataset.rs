//! Stabilized-lane corpus construction: renders scenes, stabilizes every
//! ground-truth lane plus synthesized fakes, writes them as 8-bit grayscale
//! PNGs (the 1/255 quantization matches the attack budget granularity), and
//! records everything in a JSON manifest.
//!
//! On-disk layout under the output directory:
//!
//! ```text
//! manifest.json
//! scenes/scene_00042.png      RGB frame
//! scenes/scene_00042.json     row-anchor label file
//! lanes/scene00042_lane1_real.png
//! lanes/scene00042_lane1_fake0.png
//! ```

use crate::geometry::{
    fit_polynomial, stabilize_lane, GeometryError, LaneLabel, StabilizationConfig,
};
use crate::img::{load_gray_png, save_gray_png, save_rgb_png, ImgError, Plane};
use crate::scene::{generate_fake_lane, generate_scene, FakeLaneSpec, Scene, SceneConfig, SceneError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("manifest parse failed: {0}")]
    BadManifest(#[from] serde_json::Error),
    #[error("dataset config invalid: {0}")]
    InvalidConfig(String),
    #[error("stabilized image {path} is {got_h}x{got_w}, manifest says {expected_h}x{expected_w}")]
    WrongShape {
        path: String,
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// splitmix64 mix of an arbitrary list of parts into one seed. Used to give
/// every scene / fake / attack its own decorrelated RNG stream.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E3779B97F4A7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
    }
    z
}

/// Seed-stream tags so different consumers of the same base seed never collide.
pub mod seed_tags {
    pub const SCENE: u64 = 1;
    pub const FAKE: u64 = 2;
    pub const TARGET: u64 = 3;
    pub const PATCH: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const TRAIN: u64 = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// One stabilized-lane image on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root.
    pub path: String,
    pub label: LaneLabel,
    pub scene_id: u64,
    pub lane_id: u32,
    pub split: Split,
}

/// Everything needed to regenerate and interpret the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Hash of the experiment config that produced this dataset.
    pub config_hash: String,
    pub scene: SceneConfig,
    pub stabilization: StabilizationConfig,
    pub fake: FakeLaneSpec,
    pub fakes_per_real: usize,
    pub base_seed: u64,
    pub n_scenes: u64,
    /// Scene-id boundaries: ids < n_train are Train, the next n_val are Val,
    /// the rest Test. Splits are disjoint by scene id by construction.
    pub n_train: u64,
    pub n_val: u64,
    /// Lanes whose stabilization failed (degenerate extent) and were skipped.
    pub skipped_lanes: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split_of(&self, scene_id: u64) -> Split {
        split_for(scene_id, self.n_train, self.n_val)
    }

    /// Seed for regenerating one scene of this dataset.
    pub fn scene_seed(&self, scene_id: u64) -> u64 {
        derive_seed(&[self.base_seed, seed_tags::SCENE, scene_id])
    }

    /// Regenerates a scene of this dataset bit-identically.
    pub fn regenerate_scene(&self, scene_id: u64) -> Result<Scene, SceneError> {
        generate_scene(&self.scene, self.scene_seed(scene_id))
    }

    pub fn scene_ids_for(&self, split: Split) -> Vec<u64> {
        (0..self.n_scenes)
            .filter(|&id| self.split_of(id) == split)
            .collect()
    }
}

pub fn split_for(scene_id: u64, n_train: u64, n_val: u64) -> Split {
    if scene_id < n_train {
        Split::Train
    } else if scene_id < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Build parameters for [`build_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBuildConfig {
    pub scene: SceneConfig,
    pub stabilization: StabilizationConfig,
    pub fake: FakeLaneSpec,
    pub fakes_per_real: usize,
    pub n_scenes: u64,
    pub n_train: u64,
    pub n_val: u64,
    pub base_seed: u64,
    /// Skip writing the RGB scene PNGs (label files still reference them).
    pub write_scene_images: bool,
    /// Hash of the producing config, embedded in the manifest.
    pub config_hash: String,
}

impl Default for DatasetBuildConfig {
    fn default() -> Self {
        DatasetBuildConfig {
            scene: SceneConfig::default(),
            stabilization: StabilizationConfig::default(),
            fake: FakeLaneSpec::default(),
            fakes_per_real: 2,
            n_scenes: 500,
            n_train: 360,
            n_val: 70,
            base_seed: 1,
            write_scene_images: true,
            config_hash: String::new(),
        }
    }
}

/// TuSimple-style label file: shared row anchors plus one x list per lane,
/// with -2 marking rows where the lane has no sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLabelFile {
    pub h_samples: Vec<i32>,
    pub lanes: Vec<Vec<f64>>,
    pub raw_file: String,
}

pub fn scene_label_file(scene: &Scene, cfg: &SceneConfig, raw_file: String) -> SceneLabelFile {
    let h_samples: Vec<i32> = (cfg.vanishing_row..=cfg.bottom_row()).step_by(2).collect();
    let lanes = scene
        .gt_lanes
        .iter()
        .map(|lane| {
            let mut xs = vec![-2.0; h_samples.len()];
            for &(y, x) in lane.samples() {
                if (y - cfg.vanishing_row) % 2 == 0 {
                    let idx = ((y - cfg.vanishing_row) / 2) as usize;
                    if idx < xs.len() {
                        xs[idx] = (x * 100.0).round() / 100.0;
                    }
                }
            }
            xs
        })
        .collect();
    SceneLabelFile {
        h_samples,
        lanes,
        raw_file,
    }
}

/// Renders `n_scenes` scenes, stabilizes every ground-truth lane plus
/// `fakes_per_real` synthetic fakes per lane, and writes the corpus.
///
/// Lanes that cannot be stabilized (extent shorter than 2 image rows) are
/// skipped and counted.
pub fn build_dataset(cfg: &DatasetBuildConfig, out_dir: &Path) -> Result<DatasetManifest, DatasetError> {
    if cfg.n_train + cfg.n_val > cfg.n_scenes {
        return Err(DatasetError::InvalidConfig(format!(
            "splits {}+{} exceed {} scenes",
            cfg.n_train, cfg.n_val, cfg.n_scenes
        )));
    }
    if cfg.n_scenes == 0 {
        return Err(DatasetError::InvalidConfig("n_scenes must be > 0".into()));
    }
    cfg.scene.validate()?;
    let scenes_dir = out_dir.join("scenes");
    let lanes_dir = out_dir.join("lanes");
    std::fs::create_dir_all(&scenes_dir).map_err(io_err(&scenes_dir))?;
    std::fs::create_dir_all(&lanes_dir).map_err(io_err(&lanes_dir))?;

    let mut entries = Vec::new();
    let mut skipped = 0u64;
    for scene_id in 0..cfg.n_scenes {
        let seed = derive_seed(&[cfg.base_seed, seed_tags::SCENE, scene_id]);
        let scene = generate_scene(&cfg.scene, seed)?;
        let split = split_for(scene_id, cfg.n_train, cfg.n_val);

        let raw_rel = format!("scenes/scene_{scene_id:05}.png");
        if cfg.write_scene_images {
            save_rgb_png(&scene.image, &out_dir.join(&raw_rel))?;
        }
        let label = scene_label_file(&scene, &cfg.scene, raw_rel);
        let label_path = scenes_dir.join(format!("scene_{scene_id:05}.json"));
        let json = serde_json::to_string(&label)?;
        std::fs::write(&label_path, json).map_err(io_err(&label_path))?;

        for (lane_id, lane) in scene.gt_lanes.iter().enumerate() {
            let lane_id = lane_id as u32;
            let real_rel = format!("lanes/scene{scene_id:05}_lane{lane_id}_real.png");
            match fit_polynomial(lane, 3)
                .and_then(|poly| stabilize_lane(&scene.image, &poly, &cfg.stabilization))
            {
                Ok(stab) => {
                    save_gray_png(&stab.image, &out_dir.join(&real_rel))?;
                    entries.push(ManifestEntry {
                        path: real_rel,
                        label: LaneLabel::Real,
                        scene_id,
                        lane_id,
                        split,
                    });
                }
                Err(GeometryError::EmptyExtent | GeometryError::TooFewSamples { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(DatasetError::Scene(SceneError::Geometry(e))),
            }

            for j in 0..cfg.fakes_per_real {
                let fake_seed =
                    derive_seed(&[cfg.base_seed, seed_tags::FAKE, scene_id, lane_id as u64, j as u64]);
                let fake = generate_fake_lane(lane, &cfg.fake, fake_seed)?;
                let fake_rel =
                    format!("lanes/scene{scene_id:05}_lane{lane_id}_fake{j}.png");
                match fit_polynomial(&fake, 3)
                    .and_then(|poly| stabilize_lane(&scene.image, &poly, &cfg.stabilization))
                {
                    Ok(stab) => {
                        save_gray_png(&stab.image, &out_dir.join(&fake_rel))?;
                        entries.push(ManifestEntry {
                            path: fake_rel,
                            label: LaneLabel::Fake,
                            scene_id,
                            lane_id,
                            split,
                        });
                    }
                    Err(GeometryError::EmptyExtent | GeometryError::TooFewSamples { .. }) => {
                        skipped += 1;
                    }
                    Err(e) => return Err(DatasetError::Scene(SceneError::Geometry(e))),
                }
            }
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} lanes with degenerate extents");
    }

    let manifest = DatasetManifest {
        config_hash: cfg.config_hash.clone(),
        scene: cfg.scene.clone(),
        stabilization: cfg.stabilization.clone(),
        fake: cfg.fake.clone(),
        fakes_per_real: cfg.fakes_per_real,
        base_seed: cfg.base_seed,
        n_scenes: cfg.n_scenes,
        n_train: cfg.n_train,
        n_val: cfg.n_val,
        skipped_lanes: skipped,
        entries,
    };
    save_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<(), DatasetError> {
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, json).map_err(io_err(&path))
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// The corpus loaded into memory for training and calibration.
#[derive(Debug, Clone)]
pub struct LaneCorpus {
    pub images: Vec<Plane>,
    pub labels: Vec<LaneLabel>,
    pub splits: Vec<Split>,
    pub scene_ids: Vec<u64>,
}

impl LaneCorpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of entries in a split, optionally restricted to one label.
    pub fn indices(&self, split: Split, label: Option<LaneLabel>) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split && label.map_or(true, |l| self.labels[i] == l))
            .collect()
    }
}

/// Loads every stabilized-lane PNG referenced by the manifest, validating
/// shapes against the manifest's stabilization config.
pub fn load_corpus(manifest: &DatasetManifest, root: &Path) -> Result<LaneCorpus, DatasetError> {
    let (eh, ew) = (
        manifest.stabilization.out_height,
        manifest.stabilization.out_width,
    );
    let mut images = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::with_capacity(manifest.entries.len());
    let mut splits = Vec::with_capacity(manifest.entries.len());
    let mut scene_ids = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let img = load_gray_png(&root.join(&entry.path))?;
        if img.h() != eh || img.w() != ew {
            return Err(DatasetError::WrongShape {
                path: entry.path.clone(),
                expected_h: eh,
                expected_w: ew,
                got_h: img.h(),
                got_w: img.w(),
            });
        }
        images.push(img);
        labels.push(entry.label);
        splits.push(entry.split);
        scene_ids.push(entry.scene_id);
    }
    Ok(LaneCorpus {
        images,
        labels,
        splits,
        scene_ids,
    })
}

/// Convenience for a PathBuf under a dataset root.
pub fn dataset_path(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_sensitive() {
        let a = derive_seed(&[1, seed_tags::SCENE, 5]);
        assert_eq!(a, derive_seed(&[1, seed_tags::SCENE, 5]));
        assert_ne!(a, derive_seed(&[1, seed_tags::SCENE, 6]));
        assert_ne!(a, derive_seed(&[1, seed_tags::FAKE, 5]));
        assert_ne!(a, derive_seed(&[2, seed_tags::SCENE, 5]));
    }

    #[test]
    fn split_boundaries_are_disjoint() {
        let mut seen = std::collections::HashMap::new();
        for id in 0..30u64 {
            seen.insert(id, split_for(id, 20, 5));
        }
        assert_eq!(seen[&0], Split::Train);
        assert_eq!(seen[&19], Split::Train);
        assert_eq!(seen[&20], Split::Val);
        assert_eq!(seen[&24], Split::Val);
        assert_eq!(seen[&25], Split::Test);
        assert_eq!(seen[&29], Split::Test);
    }

    #[test]
    fn label_file_has_aligned_lane_arrays() {
        let cfg = SceneConfig::default();
        let scene = generate_scene(&cfg, 11).unwrap();
        let label = scene_label_file(&scene, &cfg, "scenes/x.png".into());
        assert_eq!(label.lanes.len(), scene.gt_lanes.len());
        for xs in &label.lanes {
            assert_eq!(xs.len(), label.h_samples.len());
            assert!(xs.iter().any(|&x| x >= 0.0), "lane should have real anchors");
        }
        assert_eq!(label.raw_file, "scenes/x.png");
    }
}
