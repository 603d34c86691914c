use std::path::Path;
use std::time::Instant;

use lane_sentinel::dataset::{load_corpus, load_manifest, Split};
use lane_sentinel::img::{BitMap, SceneImage};
use lane_sentinel::neural::{
    detector_seg_iou, save_detector, save_verifier, train_detector, train_verifier,
    LinearVerifier, TrainReport, VerifierModel,
};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::meta::{elapsed_ms, write_meta, RunMeta};

use super::ensure_parent_dir;

/// Which model the train command produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Role {
    /// Toy segmentation detector the attacks run against.
    Detector,
    /// Convolutional real-vs-fake lane verifier.
    Verifier,
    /// Single-layer baseline verifier.
    LinearVerifier,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Detector => "detector",
            Role::Verifier => "verifier",
            Role::LinearVerifier => "linear-verifier",
        }
    }
}

/// Trains one model from the dataset under `data` and writes it to `out`.
/// The model file embeds the current config hash; a mismatch against the
/// dataset's hash is logged but not fatal (eval is the gatekeeper).
pub fn cmd_train(
    cfg: &ExperimentConfig,
    role: Role,
    data: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let start = Instant::now();
    let hash = cfg.hash();
    let manifest = load_manifest(data)?;
    if manifest.config_hash != hash {
        log::warn!(
            "dataset {} was built under config {}, current config hashes to {}",
            data.display(),
            manifest.config_hash,
            hash
        );
    }
    ensure_parent_dir(out)?;

    let extra = match role {
        Role::Detector => {
            // Crops are drawn from a fixed prefix of the train split; holding
            // every train scene in memory would buy nothing at this scale.
            let n = cfg
                .detector_train_scenes
                .min(manifest.scene_ids_for(Split::Train).len())
                .max(1);
            let ids = manifest.scene_ids_for(Split::Train);
            let mut scenes: Vec<(SceneImage, BitMap)> = Vec::with_capacity(n);
            for &id in ids.iter().take(n) {
                let scene = manifest.regenerate_scene(id)?;
                scenes.push((scene.image, scene.seg_map));
            }
            let (det, report) = train_detector(&scenes, &cfg.detector_train)?;
            save_detector(&det, &hash, out)?;
            let iou = detector_seg_iou(&det, &scenes[..scenes.len().min(4)]);
            log::info!(
                "detector: final loss {:.4}, seg IoU on {} train scenes {:.3}",
                report.losses.last().copied().unwrap_or(f64::NAN),
                scenes.len().min(4),
                iou
            );
            serde_json::json!({
                "role": role.as_str(),
                "train_scenes": scenes.len(),
                "final_loss": report.losses.last(),
                "train_seg_iou": iou,
            })
        }
        Role::Verifier => {
            let corpus = load_corpus(&manifest, data)?;
            let stab = &cfg.stabilization;
            let model =
                VerifierModel::seeded(stab.out_height, stab.out_width, cfg.verifier_train.seed);
            let (best, report) = train_verifier(model, &corpus, &cfg.verifier_train)?;
            save_verifier(&best, &hash, out)?;
            log_verifier(role, &report);
            report_extra(role, &report)
        }
        Role::LinearVerifier => {
            let corpus = load_corpus(&manifest, data)?;
            let stab = &cfg.stabilization;
            let model =
                LinearVerifier::seeded(stab.out_height, stab.out_width, cfg.linear_train.seed);
            let (best, report) = train_verifier(model, &corpus, &cfg.linear_train)?;
            save_verifier(&best, &hash, out)?;
            log_verifier(role, &report);
            report_extra(role, &report)
        }
    };

    write_meta(
        out,
        &RunMeta {
            command: "train".into(),
            config_hash: hash,
            seed: seed_for(cfg, role),
            wall_ms: elapsed_ms(start),
            extra,
        },
    )?;
    Ok(())
}

fn seed_for(cfg: &ExperimentConfig, role: Role) -> u64 {
    match role {
        Role::Detector => cfg.detector_train.seed,
        Role::Verifier => cfg.verifier_train.seed,
        Role::LinearVerifier => cfg.linear_train.seed,
    }
}

fn log_verifier(role: Role, report: &TrainReport) {
    log::info!(
        "{}: best epoch {}, val balanced accuracy {:.4}",
        role.as_str(),
        report.best_epoch,
        report.best_val_balanced_acc
    );
}

fn report_extra(role: Role, report: &TrainReport) -> serde_json::Value {
    serde_json::json!({
        "role": role.as_str(),
        "best_epoch": report.best_epoch,
        "best_val_balanced_acc": report.best_val_balanced_acc,
        "epochs": report.epochs.len(),
    })
}
