use std::path::Path;
use std::time::Instant;

use lane_sentinel::dataset::{load_corpus, load_manifest, Split};
use lane_sentinel::geometry::{LaneLabel, PolyLane};
use lane_sentinel::img::load_gray_png;
use lane_sentinel::metrics::{
    auc, calibrate_threshold, evaluate_defense, fnr_at_fpr, rejection_rate, roc_curve,
    DefenseReport, RocPoint, SceneEvalInput,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::meta::{elapsed_ms, write_meta, RunMeta};
use crate::svg::{unit_line_chart, Series};

use super::{read_results, resolve_stab_path, score_in_chunks, write_json_pretty, AnyVerifier};

/// Threshold calibration and verifier quality on the held-out corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Split the threshold was calibrated on.
    pub split: String,
    pub target_fpr: f64,
    /// Scores strictly above this are rejected.
    pub tau: f64,
    /// Realized false-positive rate on the calibration split.
    pub calibration_fpr: f64,
    /// False-positive rate the same threshold yields on the test split.
    pub test_fpr: f64,
    pub auc_calibration: f64,
    pub auc_test: f64,
    /// Test-split false-negative rate on the corpus at the target budget,
    /// read off the ROC curve (corpus fakes, not attacked lanes).
    pub corpus_fnr_at_target_fpr: f64,
    pub n_real_calibration: usize,
    pub n_fake_calibration: usize,
    pub n_real_test: usize,
    pub n_fake_test: usize,
}

/// Everything the eval command measures for one results file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    /// File name (not path) of the results the report was computed from.
    pub results_file: String,
    pub mode: String,
    pub adaptive: bool,
    pub cycles: usize,
    pub eps: f64,
    pub n_records: usize,
    /// Verifier the lanes were rescored with (may differ from the one the
    /// attack saw).
    pub verifier_kind: String,
    pub calibration: CalibrationReport,
    /// Defense outcome at the calibrated threshold.
    pub defended: DefenseReport,
    /// Same records with the verifier disabled (every lane accepted).
    pub unprotected: DefenseReport,
    /// Test-split ROC of the verifier on the corpus.
    pub roc: Vec<RocPoint>,
}

pub struct EvalArgs<'a> {
    pub results: &'a Path,
    pub data: &'a Path,
    pub verifier: &'a Path,
    /// "train" or "val"; the test split is reserved for reporting.
    pub calibrate_split: &'a str,
    pub out: &'a Path,
    pub svg: bool,
    /// Evaluate even when config hashes disagree.
    pub force: bool,
}

/// Rescores the recorded lanes with the given verifier, calibrates the
/// acceptance threshold on real corpus lanes, and reports defended and
/// unprotected outcomes side by side.
pub fn cmd_eval(cfg: &ExperimentConfig, args: &EvalArgs<'_>) -> Result<EvalReport, CliError> {
    let start = Instant::now();
    let hash = cfg.hash();
    let (header, records) = read_results(args.results)?;
    if records.is_empty() {
        return Err(CliError::NoResults(args.results.display().to_string()));
    }

    let manifest = load_manifest(args.data)?;
    let (verifier, verifier_hash) = AnyVerifier::load(args.verifier, &cfg.stabilization)?;
    for (context, found) in [
        ("results file", &header.config_hash),
        ("dataset", &manifest.config_hash),
        ("verifier model", &verifier_hash),
    ] {
        if found != &hash {
            if args.force {
                log::warn!("{context} was produced under config {found}, current is {hash} (forced)");
            } else {
                return Err(CliError::HashMismatch {
                    context: context.into(),
                    found: found.clone(),
                    expected: hash,
                });
            }
        }
    }

    let cal_split = match args.calibrate_split {
        "train" => Split::Train,
        "val" => Split::Val,
        other => {
            return Err(CliError::Arg(format!(
                "calibrate split {other:?} must be train or val; test is reserved for reporting"
            )))
        }
    };

    // Corpus scores for calibration and ROC reporting.
    let corpus = load_corpus(&manifest, args.data)?;
    let score_split = |split: Split, label: LaneLabel| -> Result<Vec<f64>, CliError> {
        let idx = corpus.indices(split, Some(label));
        let imgs: Vec<_> = idx.iter().map(|&i| &corpus.images[i]).collect();
        score_in_chunks(&verifier, &imgs)
    };
    let real_cal = score_split(cal_split, LaneLabel::Real)?;
    let fake_cal = score_split(cal_split, LaneLabel::Fake)?;
    let real_test = score_split(Split::Test, LaneLabel::Real)?;
    let fake_test = score_split(Split::Test, LaneLabel::Fake)?;
    let tau = calibrate_threshold(&real_cal, cfg.target_fpr)?;
    let roc = roc_curve(&real_test, &fake_test);
    let calibration = CalibrationReport {
        split: args.calibrate_split.into(),
        target_fpr: cfg.target_fpr,
        tau,
        calibration_fpr: rejection_rate(&real_cal, tau),
        test_fpr: rejection_rate(&real_test, tau),
        auc_calibration: auc(&real_cal, &fake_cal),
        auc_test: auc(&real_test, &fake_test),
        corpus_fnr_at_target_fpr: fnr_at_fpr(&roc, cfg.target_fpr),
        n_real_calibration: real_cal.len(),
        n_fake_calibration: fake_cal.len(),
        n_real_test: real_test.len(),
        n_fake_test: fake_test.len(),
    };

    // Rescore the recorded stabilized lanes with this verifier and fetch
    // the exact ground-truth polys of each attacked scene.
    let mut scored: Vec<Vec<f64>> = Vec::with_capacity(records.len());
    let mut gt_polys: Vec<Vec<PolyLane>> = Vec::with_capacity(records.len());
    for record in &records {
        let mut planes = Vec::with_capacity(record.lanes.len());
        for lane in &record.lanes {
            let path = resolve_stab_path(args.results, &lane.stab_png);
            planes.push(load_gray_png(&path)?);
        }
        let refs: Vec<_> = planes.iter().collect();
        scored.push(score_in_chunks(&verifier, &refs)?);
        gt_polys.push(manifest.regenerate_scene(record.scene_id)?.lane_polys);
    }
    let inputs: Vec<SceneEvalInput<'_>> = records
        .iter()
        .zip(&scored)
        .zip(&gt_polys)
        .map(|((record, scores), gt)| SceneEvalInput {
            record,
            scores,
            gt_polys: gt,
        })
        .collect();
    let defended = evaluate_defense(&inputs, tau, &cfg.scene);
    let unprotected = evaluate_defense(&inputs, f64::INFINITY, &cfg.scene);

    let report = EvalReport {
        config_hash: hash.clone(),
        results_file: args
            .results
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        mode: header.mode.clone(),
        adaptive: header.adaptive,
        cycles: header.cycles,
        eps: header.eps,
        n_records: records.len(),
        verifier_kind: verifier.kind().into(),
        calibration,
        defended,
        unprotected,
        roc,
    };
    write_json_pretty(args.out, &report)?;

    if args.svg {
        let svg_path = args.out.with_extension("svg");
        let curve: Vec<(f64, f64)> = report.roc.iter().map(|p| (p.fpr, p.fnr)).collect();
        let diagonal = [(0.0, 1.0), (1.0, 0.0)];
        let (ox, oy) = (report.calibration.test_fpr, report.defended.fnr);
        let op_point = [(ox - 0.02, oy), (ox + 0.02, oy)];
        let chart = unit_line_chart(
            "verifier error tradeoff (test split)",
            "false positive rate",
            "false negative rate",
            &[
                Series {
                    label: "corpus ROC",
                    color: "#1f77b4",
                    points: &curve,
                },
                Series {
                    label: "chance",
                    color: "#bbbbbb",
                    points: &diagonal,
                },
                Series {
                    label: "calibrated operating point (attacked scenes)",
                    color: "#d62728",
                    points: &op_point,
                },
            ],
        );
        std::fs::write(&svg_path, chart).map_err(|e| crate::error::io_err(&svg_path, e))?;
    }

    write_meta(
        args.out,
        &RunMeta {
            command: "eval".into(),
            config_hash: hash,
            seed: cfg.base_seed,
            wall_ms: elapsed_ms(start),
            extra: serde_json::json!({
                "results_file": report.results_file,
                "tau": report.calibration.tau,
                "fnr": report.defended.fnr,
                "unprotected_fnr": report.unprotected.fnr,
            }),
        },
    )?;
    log::info!(
        "eval {}: tau {:.4}, FNR {:.3} (unprotected {:.3}), test FPR {:.3}",
        report.results_file,
        report.calibration.tau,
        report.defended.fnr,
        report.unprotected.fnr,
        report.calibration.test_fpr
    );
    Ok(report)
}
