use std::path::Path;
use std::time::Instant;

use lane_sentinel::dataset::{load_manifest, Split};
use lane_sentinel::img::SceneImage;
use lane_sentinel::metrics::calibrate_threshold;
use lane_sentinel::pipeline::{bench_overhead, BenchReport, PipelineConfig};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::meta::{elapsed_ms, write_meta, RunMeta};

use super::{load_detector_file, score_in_chunks, write_json_pretty, AnyVerifier};

pub struct BenchArgs<'a> {
    pub data: &'a Path,
    pub detector: &'a Path,
    pub verifier: &'a Path,
    pub out: &'a Path,
    pub reps: Option<usize>,
    pub scenes: Option<usize>,
}

/// Times detection alone against detection plus verification over test
/// scenes and reports the median overhead. The report carries wall-clock
/// numbers, so it is the one artifact that varies across reruns.
pub fn cmd_bench(cfg: &ExperimentConfig, args: &BenchArgs<'_>) -> Result<BenchReport, CliError> {
    let start = Instant::now();
    let hash = cfg.hash();
    let manifest = load_manifest(args.data)?;
    let (det, _) = load_detector_file(args.detector)?;
    let (verifier, _) = AnyVerifier::load(args.verifier, &cfg.stabilization)?;

    let reps = args.reps.unwrap_or(cfg.bench_reps).max(1);
    let n = args.scenes.unwrap_or(cfg.bench_scenes).max(1);
    let ids = manifest.scene_ids_for(Split::Test);
    if ids.is_empty() {
        return Err(CliError::Arg("dataset has no test scenes".into()));
    }
    let mut scenes: Vec<SceneImage> = Vec::with_capacity(n.min(ids.len()));
    for &id in ids.iter().take(n) {
        scenes.push(manifest.regenerate_scene(id)?.image);
    }

    // The threshold does not change the work done per lane; calibrate it
    // anyway so the pipeline runs exactly as deployed.
    let corpus = lane_sentinel::dataset::load_corpus(&manifest, args.data)?;
    let idx = corpus.indices(Split::Val, Some(lane_sentinel::geometry::LaneLabel::Real));
    let imgs: Vec<_> = idx.iter().map(|&i| &corpus.images[i]).collect();
    let real_val = score_in_chunks(&verifier, &imgs)?;
    let tau = calibrate_threshold(&real_val, cfg.target_fpr)?;

    let pipe_cfg = PipelineConfig {
        fit_degree: 3,
        tau,
    };
    let report = match &verifier {
        AnyVerifier::Cnn(v) => bench_overhead(&det, v, &scenes, &cfg.stabilization, &pipe_cfg, reps),
        AnyVerifier::Linear(v) => {
            bench_overhead(&det, v, &scenes, &cfg.stabilization, &pipe_cfg, reps)
        }
    };
    write_json_pretty(args.out, &report)?;
    write_meta(
        args.out,
        &RunMeta {
            command: "bench".into(),
            config_hash: hash,
            seed: cfg.base_seed,
            wall_ms: elapsed_ms(start),
            extra: serde_json::json!({
                "reps": reps,
                "scenes": scenes.len(),
                "overhead": report.overhead,
                "verify_ms_per_lane": report.verify_ms_per_lane,
            }),
        },
    )?;
    log::info!(
        "bench: detect {:.1} ms, defended {:.1} ms, overhead {:.1}%, {:.2} ms per lane",
        report.detect_ms,
        report.defended_ms,
        report.overhead * 100.0,
        report.verify_ms_per_lane
    );
    Ok(report)
}
