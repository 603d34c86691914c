use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lane_sentinel::attack::{
    attack_adaptive, attack_scene_seg, channel_mask, choose_gap_target, place_patch, scene_flat,
    AttackConfig, Feasible, PatchPlacement, PatchSizing,
};
use lane_sentinel::attack::{AttackRecord, LaneObservation, TargetInfo};
use lane_sentinel::dataset::{derive_seed, seed_tags, DatasetManifest, Split};
use lane_sentinel::geometry::{fit_polynomial, stabilize_lane};
use lane_sentinel::img::{save_gray_png, BitMap};
use lane_sentinel::metrics::{iou_bitmaps, matches_target};
use lane_sentinel::neural::{seg_from_probs, ToyDetector, VerifierNet};
use lane_sentinel::scene::render_lane_mask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError};
use crate::meta::{elapsed_ms, write_meta, RunMeta};

use super::{ensure_parent_dir, load_detector_file, AnyVerifier};

/// Attack family selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AttackMode {
    /// L-infinity bounded perturbation over the whole frame.
    Bounded,
    /// Unbounded pixels inside one fixed-size patch square.
    PatchFixed,
    /// Patch whose side scales with scene depth at its row.
    PatchVariable,
}

impl AttackMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMode::Bounded => "bounded",
            AttackMode::PatchFixed => "patch-fixed",
            AttackMode::PatchVariable => "patch-variable",
        }
    }

    /// Stable component for seed derivation.
    fn tag(&self) -> u64 {
        match self {
            AttackMode::Bounded => 10,
            AttackMode::PatchFixed => 11,
            AttackMode::PatchVariable => 12,
        }
    }
}

/// First line of every results file: enough to interpret the records and to
/// verify provenance before evaluating them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsHeader {
    pub kind: String,
    pub config_hash: String,
    pub mode: String,
    pub adaptive: bool,
    pub cycles: usize,
    pub eps: f64,
    pub step: f64,
    pub max_iters: usize,
    pub scenes: usize,
    pub verifier_kind: String,
}

pub const RESULTS_KIND: &str = "attack-results";

pub struct AttackArgs<'a> {
    pub data: &'a Path,
    pub detector: &'a Path,
    pub verifier: &'a Path,
    pub mode: AttackMode,
    pub adaptive: bool,
    pub cycles: usize,
    pub out: &'a Path,
    /// Overrides the configured number of attacked test scenes.
    pub scenes: Option<usize>,
}

/// Attacks test-split scenes and writes one JSONL record per scene, plus the
/// stabilized crop of every lane the detector reported on the attacked
/// frame. Inputs (dataset, models) are never modified.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    args: &AttackArgs<'_>,
    pool: &rayon::ThreadPool,
) -> Result<Vec<AttackRecord>, CliError> {
    let start = Instant::now();
    if args.adaptive && !(1..=4).contains(&args.cycles) {
        return Err(CliError::Arg(format!(
            "cycles {} out of range 1..=4",
            args.cycles
        )));
    }
    let hash = cfg.hash();
    let manifest = lane_sentinel::dataset::load_manifest(args.data)?;
    let (det, det_hash) = load_detector_file(args.detector)?;
    let (verifier, verifier_hash) = AnyVerifier::load(args.verifier, &cfg.stabilization)?;
    for (what, found) in [
        ("dataset", &manifest.config_hash),
        ("detector", &det_hash),
        ("verifier", &verifier_hash),
    ] {
        if found != &hash {
            log::warn!("{what} was produced under config {found}, current is {hash}");
        }
    }

    let n = args.scenes.unwrap_or(cfg.attack_scenes);
    let test_ids = manifest.scene_ids_for(Split::Test);
    if test_ids.len() < n {
        return Err(CliError::Arg(format!(
            "asked for {n} attack scenes but the test split has {}",
            test_ids.len()
        )));
    }
    let ids = &test_ids[..n];

    let stab_dir_name = stab_dir_name(args.out);
    let stab_dir = args
        .out
        .parent()
        .unwrap_or(Path::new("."))
        .join(&stab_dir_name);
    ensure_parent_dir(args.out)?;
    fs::create_dir_all(&stab_dir).map_err(|e| io_err(&stab_dir, e))?;

    let atk_cfg = match args.mode {
        AttackMode::Bounded => &cfg.attack_bounded,
        AttackMode::PatchFixed | AttackMode::PatchVariable => &cfg.attack_patch,
    };
    atk_cfg.validate()?;
    cfg.attack_stage2.validate()?;

    let records: Vec<Result<AttackRecord, CliError>> = pool.install(|| {
        ids.par_iter()
            .map(|&scene_id| match &verifier {
                AnyVerifier::Cnn(v) => {
                    attack_one(cfg, &manifest, &det, v, args, scene_id, &stab_dir, &stab_dir_name)
                }
                AnyVerifier::Linear(v) => {
                    attack_one(cfg, &manifest, &det, v, args, scene_id, &stab_dir, &stab_dir_name)
                }
            })
            .collect()
    });
    let records: Vec<AttackRecord> = records.into_iter().collect::<Result<_, _>>()?;

    let header = ResultsHeader {
        kind: RESULTS_KIND.into(),
        config_hash: hash.clone(),
        mode: args.mode.as_str().into(),
        adaptive: args.adaptive,
        cycles: if args.adaptive { args.cycles } else { 0 },
        eps: atk_cfg.eps,
        step: atk_cfg.step,
        max_iters: atk_cfg.max_iters,
        scenes: n,
        verifier_kind: verifier.kind().into(),
    };
    write_results(args.out, &header, &records)?;

    let mean_iou = records.iter().map(|r| r.iou_vs_target).sum::<f64>() / records.len().max(1) as f64;
    write_meta(
        args.out,
        &RunMeta {
            command: "attack".into(),
            config_hash: hash,
            seed: atk_cfg.seed,
            wall_ms: elapsed_ms(start),
            extra: serde_json::json!({
                "mode": args.mode.as_str(),
                "adaptive": args.adaptive,
                "scenes": records.len(),
                "mean_iou_vs_target": mean_iou,
                "lanes": records.iter().map(|r| r.lanes.len()).sum::<usize>(),
            }),
        },
    )?;
    log::info!(
        "attack {}: {} scenes, mean IoU vs target {:.3} -> {}",
        args.mode.as_str(),
        records.len(),
        mean_iou,
        args.out.display()
    );
    Ok(records)
}

/// Directory the stabilized crops go in, next to the results file.
fn stab_dir_name(out: &Path) -> String {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    format!("{stem}-stab")
}

#[allow(clippy::too_many_arguments)]
fn attack_one<V: VerifierNet>(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    det: &ToyDetector,
    verifier: &V,
    args: &AttackArgs<'_>,
    scene_id: u64,
    stab_dir: &Path,
    stab_dir_name: &str,
) -> Result<AttackRecord, CliError> {
    let start = Instant::now();
    let scene = manifest.regenerate_scene(scene_id)?;
    let (h, w) = (scene.image.h(), scene.image.w());
    let (_, clean) = det.detect(&scene.image)?;

    let target = choose_gap_target(&scene)?;
    let target_seg = render_lane_mask(&target, &cfg.scene);

    let atk_cfg = match args.mode {
        AttackMode::Bounded => &cfg.attack_bounded,
        AttackMode::PatchFixed | AttackMode::PatchVariable => &cfg.attack_patch,
    };
    // The start draw is the only rng use, so every mode and cycle count
    // explores from the same point on the same scene.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        cfg.base_seed,
        seed_tags::ATTACK,
        args.mode.tag(),
        atk_cfg.seed,
        scene_id,
    ]));

    let (feasible, patch, region_mask): (Feasible, Option<PatchPlacement>, Option<BitMap>) =
        match args.mode {
            AttackMode::Bounded => (
                Feasible::Ball {
                    center: scene_flat(&scene.image),
                    eps: atk_cfg.eps,
                },
                None,
                None,
            ),
            AttackMode::PatchFixed | AttackMode::PatchVariable => {
                let sizing = if args.mode == AttackMode::PatchFixed {
                    PatchSizing::Fixed
                } else {
                    PatchSizing::Scaled
                };
                let mut patch_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    cfg.base_seed,
                    seed_tags::PATCH,
                    args.mode.tag(),
                    scene_id,
                ]));
                let placement = place_patch(&cfg.scene, &target, sizing, &mut patch_rng)?;
                let mask = placement.mask(h, w);
                (
                    Feasible::MaskedBox {
                        center: scene_flat(&scene.image),
                        mask: channel_mask(&mask),
                    },
                    Some(placement),
                    Some(mask),
                )
            }
        };

    let (adv, iterations, converged) = if args.adaptive {
        // Budgets split evenly across cycles: total work is the same for
        // every cycle count, so the ablation isolates the alternation.
        let cycles = args.cycles;
        let s1 = AttackConfig {
            max_iters: (atk_cfg.max_iters / cycles).max(1),
            ..atk_cfg.clone()
        };
        let s2 = AttackConfig {
            max_iters: (cfg.attack_stage2.max_iters / cycles).max(1),
            ..cfg.attack_stage2.clone()
        };
        let budget = (s1.max_iters + s2.max_iters) * cycles;
        // A verifier evasion only counts while the planted lane is still
        // detected; otherwise the evasion stage would simply erase it.
        let keep = |img: &lane_sentinel::img::SceneImage| -> bool {
            let Ok((_, lanes)) = det.detect(img) else {
                return false;
            };
            lanes.iter().any(|lane| {
                fit_polynomial(lane, 3)
                    .map(|poly| matches_target(&poly, &target, &scene.lane_polys))
                    .unwrap_or(false)
            })
        };
        let out = attack_adaptive(
            det,
            verifier,
            &scene.image,
            &target,
            &target_seg,
            &cfg.stabilization,
            &feasible,
            region_mask.as_ref(),
            &s1,
            &s2,
            cycles,
            &mut rng,
            Some(&keep),
        )?;
        let iters = out.stage1_iterations + out.stage2_iterations;
        (out.adv, iters, iters < budget)
    } else {
        let out = attack_scene_seg(
            det,
            &scene.image,
            &target_seg,
            &feasible,
            atk_cfg,
            &mut rng,
            None,
        )?;
        (out.adv, out.iterations, out.converged)
    };

    let (probs, lanes) = det.detect(&adv)?;
    let adv_seg = seg_from_probs(&probs, ToyDetector::THRESHOLD);
    let iou_vs_target = iou_bitmaps(&adv_seg, &target_seg);

    let mut observations = Vec::with_capacity(lanes.len());
    for (k, lane) in lanes.iter().enumerate() {
        let poly = match fit_polynomial(lane, 3) {
            Ok(p) => p,
            Err(e) => {
                log::debug!("scene {scene_id} lane {k}: fit failed ({e}), skipping");
                continue;
            }
        };
        let stab = match stabilize_lane(&adv, &poly, &cfg.stabilization) {
            Ok(s) => s,
            Err(e) => {
                log::debug!("scene {scene_id} lane {k}: stabilization failed ({e}), skipping");
                continue;
            }
        };
        let file = format!("scene{scene_id:04}_lane{k}.png");
        save_gray_png(&stab.image, &stab_dir.join(&file))?;
        let score = verifier.score_plane(&stab.image)?;
        observations.push(LaneObservation {
            lane_id: k as u32,
            coeffs: poly.coeffs.clone(),
            row_min: poly.row_min,
            row_max: poly.row_max,
            stab_png: format!("{stab_dir_name}/{file}"),
            score,
        });
    }

    Ok(AttackRecord {
        scene_id,
        mode: args.mode.as_str().into(),
        cycles: if args.adaptive { args.cycles } else { 0 },
        eps: atk_cfg.eps,
        step: atk_cfg.step,
        patch,
        target: TargetInfo::from_poly(&target),
        iou_vs_target,
        iterations,
        converged,
        wall_ms: elapsed_ms(start),
        clean_lanes: clean.len(),
        lanes: observations,
    })
}

fn write_results(
    out: &Path,
    header: &ResultsHeader,
    records: &[AttackRecord],
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, header).map_err(|e| crate::error::json_err(out, e))?;
    buf.push(b'\n');
    for record in records {
        serde_json::to_writer(&mut buf, record).map_err(|e| crate::error::json_err(out, e))?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(out).map_err(|e| io_err(out, e))?;
    file.write_all(&buf).map_err(|e| io_err(out, e))?;
    Ok(())
}

/// Reads a results file back: header plus records. Used by eval and tests.
pub fn read_results(path: &Path) -> Result<(ResultsHeader, Vec<AttackRecord>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines
        .next()
        .ok_or_else(|| CliError::NoResults(path.display().to_string()))?;
    let header: ResultsHeader =
        serde_json::from_str(header_line).map_err(|e| crate::error::json_err(path, e))?;
    if header.kind != RESULTS_KIND {
        return Err(CliError::Arg(format!(
            "{}: not an attack results file (kind {:?})",
            path.display(),
            header.kind
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let record: AttackRecord =
            serde_json::from_str(line).map_err(|e| crate::error::json_err(path, e))?;
        records.push(record);
    }
    Ok((header, records))
}

/// Where a record's stabilized crops live, given the results file they came
/// from.
pub fn resolve_stab_path(results: &Path, rel: &str) -> PathBuf {
    results.parent().unwrap_or(Path::new(".")).join(rel)
}
