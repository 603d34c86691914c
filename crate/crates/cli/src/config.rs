use std::fs;
use std::path::Path;

use lane_sentinel::attack::AttackConfig;
use lane_sentinel::geometry::StabilizationConfig;
use lane_sentinel::neural::{DetectorTrainConfig, FocalParams, TrainConfig};
use lane_sentinel::scene::{FakeLaneSpec, SceneConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, json_err, CliError};

/// Everything one experiment needs, in one JSON file. Fields omitted from
/// the file take the defaults below; unknown fields are rejected so typos
/// fail loudly. The hash of the fully resolved struct (after CLI flag
/// overrides) is stamped into every artifact the commands produce.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed every derived stream (scenes, fakes, training, attacks) hangs off.
    pub base_seed: u64,
    pub scene: SceneConfig,
    pub stabilization: StabilizationConfig,
    pub fake: FakeLaneSpec,
    /// Synthetic fake lanes written per real lane when building the corpus.
    pub fakes_per_real: usize,
    pub n_scenes: u64,
    pub n_train: u64,
    pub n_val: u64,
    pub detector_train: DetectorTrainConfig,
    /// Scenes actually held in memory for detector training (crops are drawn
    /// from these); capped at the train split size.
    pub detector_train_scenes: usize,
    pub verifier_train: TrainConfig,
    /// Separate schedule for the linear baseline: one layer on raw pixels
    /// needs a far smaller step than the convolutional model.
    pub linear_train: TrainConfig,
    /// Stage-one budget: drives the detector segmentation toward the planted
    /// lane inside an L-infinity ball.
    pub attack_bounded: AttackConfig,
    /// Patch budget: pixels inside the patch square range over [0, 1].
    pub attack_patch: AttackConfig,
    /// Stage-two budget: lowers the verifier score in the stabilized frame.
    pub attack_stage2: AttackConfig,
    /// Test-split scenes attacked per condition.
    pub attack_scenes: usize,
    /// Cycle count for the many-cycle adaptive condition. The stage budgets
    /// are split evenly across cycles so cycle counts compare equal compute.
    pub adaptive_cycles: usize,
    /// False-positive budget the acceptance threshold is calibrated to.
    pub target_fpr: f64,
    pub bench_reps: usize,
    pub bench_scenes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Large enough to plant a detectable lane against the high-contrast
        // toy detector; markings sit ~0.5 luminance above the road, so
        // single-digit 1/255 budgets cannot move its decisions.
        let eps = 32.0 / 255.0;
        ExperimentConfig {
            base_seed: 20260814,
            scene: SceneConfig {
                width: 384,
                height: 192,
                lanes_min: 2,
                lanes_max: 4,
                vanishing_row: 64,
                lane_width_bottom: 12.0,
                ..SceneConfig::default()
            },
            stabilization: StabilizationConfig::default(),
            fake: FakeLaneSpec::default(),
            fakes_per_real: 2,
            n_scenes: 500,
            n_train: 360,
            n_val: 70,
            detector_train: DetectorTrainConfig {
                steps: 800,
                batch: 8,
                crop: 128,
                // Above ~0.05 with momentum the relu stages die early and
                // the model collapses to the class prior.
                lr: 0.02,
                momentum: 0.9,
                seed: 11,
            },
            detector_train_scenes: 64,
            verifier_train: TrainConfig {
                epochs: 12,
                batch_size: 64,
                lr: 0.05,
                momentum: 0.9,
                lr_decay_factor: 0.1,
                adv_fraction: 0.5,
                adv_eps: eps,
                adv_steps: 5,
                focal: FocalParams::default(),
                seed: 12,
            },
            linear_train: TrainConfig {
                epochs: 12,
                batch_size: 64,
                lr: 0.002,
                momentum: 0.9,
                lr_decay_factor: 0.1,
                adv_fraction: 0.5,
                adv_eps: eps,
                adv_steps: 5,
                focal: FocalParams::default(),
                seed: 13,
            },
            attack_bounded: AttackConfig {
                eps,
                step: eps / 4.0,
                max_iters: 100,
                conv_tol: 1e-4,
                conv_window: 10,
                seed: 21,
            },
            attack_patch: AttackConfig {
                eps: 1.0,
                step: 0.05,
                max_iters: 150,
                conv_tol: 1e-4,
                conv_window: 10,
                seed: 22,
            },
            attack_stage2: AttackConfig {
                eps,
                step: 2.0 / 255.0,
                max_iters: 60,
                conv_tol: 1e-4,
                conv_window: 10,
                seed: 23,
            },
            attack_scenes: 16,
            adaptive_cycles: 4,
            target_fpr: 0.05,
            bench_reps: 5,
            bench_scenes: 8,
        }
    }
}

impl ExperimentConfig {
    /// Loads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(ExperimentConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                let cfg: ExperimentConfig =
                    serde_json::from_str(&text).map_err(|e| json_err(p, e))?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_train + self.n_val > self.n_scenes {
            return Err(CliError::Config(format!(
                "splits exceed the corpus: {} train + {} val > {} scenes",
                self.n_train, self.n_val, self.n_scenes
            )));
        }
        let n_test = self.n_scenes - self.n_train - self.n_val;
        if self.attack_scenes as u64 > n_test {
            return Err(CliError::Config(format!(
                "attack_scenes {} exceeds the {} test scenes",
                self.attack_scenes, n_test
            )));
        }
        if self.adaptive_cycles == 0 || self.adaptive_cycles > 8 {
            return Err(CliError::Config(format!(
                "adaptive_cycles {} out of range 1..=8",
                self.adaptive_cycles
            )));
        }
        if !(0.0..=1.0).contains(&self.target_fpr) {
            return Err(CliError::Config(format!(
                "target_fpr {} out of range [0, 1]",
                self.target_fpr
            )));
        }
        Ok(())
    }

    /// Canonical serialization the config hash is computed over: compact
    /// JSON with fields in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization. Identifies the exact
    /// fully resolved configuration in every artifact.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}
