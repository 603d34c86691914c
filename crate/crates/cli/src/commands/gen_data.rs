use std::path::Path;
use std::time::Instant;

use lane_sentinel::dataset::{build_dataset, DatasetBuildConfig, DatasetManifest};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::meta::{elapsed_ms, write_meta, RunMeta};

/// Builds the synthetic scene + stabilized-lane corpus under `out`.
/// The artifact is the directory itself (manifest.json plus per-scene
/// subdirectories); a gen-data.meta.json sidecar records the run.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest, CliError> {
    let start = Instant::now();
    let hash = cfg.hash();
    let build = DatasetBuildConfig {
        scene: cfg.scene.clone(),
        stabilization: cfg.stabilization.clone(),
        fake: cfg.fake.clone(),
        fakes_per_real: cfg.fakes_per_real,
        n_scenes: cfg.n_scenes,
        n_train: cfg.n_train,
        n_val: cfg.n_val,
        base_seed: cfg.base_seed,
        write_scene_images: true,
        config_hash: hash.clone(),
    };
    let manifest = build_dataset(&build, out)?;
    write_meta(
        out,
        &RunMeta {
            command: "gen-data".into(),
            config_hash: hash,
            seed: cfg.base_seed,
            wall_ms: elapsed_ms(start),
            extra: serde_json::json!({
                "scenes": manifest.n_scenes,
                "entries": manifest.entries.len(),
                "skipped_lanes": manifest.skipped_lanes,
            }),
        },
    )?;
    log::info!(
        "gen-data: {} scenes, {} lane entries -> {}",
        manifest.n_scenes,
        manifest.entries.len(),
        out.display()
    );
    Ok(manifest)
}
