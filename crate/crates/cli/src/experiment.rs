use std::path::{Path, PathBuf};

use lane_sentinel::pipeline::BenchReport;
use serde::{Deserialize, Serialize};

use crate::commands::{
    cmd_attack, cmd_bench, cmd_eval, cmd_gen_data, cmd_train, AttackArgs, AttackMode, BenchArgs,
    EvalArgs, EvalReport, Role,
};
use crate::config::ExperimentConfig;
use crate::error::CliError;

/// One attack condition of the full experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub name: String,
    pub mode: String,
    pub adaptive: bool,
    pub cycles: usize,
    pub verifier_kind: String,
    /// Attacked scenes in which the planted lane was actually detected.
    pub n_attacked: usize,
    pub fnr: f64,
    pub fn_avg_iou: f64,
    pub unprotected_fnr: f64,
    pub unprotected_fn_avg_iou: f64,
    pub real_reject_rate: f64,
    pub test_fpr: f64,
    pub tau: f64,
}

impl ConditionSummary {
    fn from_report(name: &str, report: &EvalReport) -> Self {
        ConditionSummary {
            name: name.into(),
            mode: report.mode.clone(),
            adaptive: report.adaptive,
            cycles: report.cycles,
            verifier_kind: report.verifier_kind.clone(),
            n_attacked: report.defended.n_attacked,
            fnr: report.defended.fnr,
            fn_avg_iou: report.defended.fn_avg_iou,
            unprotected_fnr: report.unprotected.fnr,
            unprotected_fn_avg_iou: report.unprotected.fn_avg_iou,
            real_reject_rate: report.defended.real_reject_rate,
            test_fpr: report.calibration.test_fpr,
            tau: report.calibration.tau,
        }
    }
}

/// Final artifact of `run-all`: the numbers the defense claims, one place.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub n_scenes: u64,
    pub attack_scenes: usize,
    pub verifier_auc_test: f64,
    pub verifier_tau: f64,
    pub verifier_test_fpr: f64,
    pub conditions: Vec<ConditionSummary>,
    /// Absent when benchmarking was skipped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchReport>,
}

/// Which stages `run_experiment` executes.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentOptions {
    /// Benchmark timing at the end (the only wall-clock-dependent artifact).
    pub bench: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions { bench: true }
    }
}

pub struct ExperimentPaths {
    pub root: PathBuf,
    pub data: PathBuf,
    pub detector: PathBuf,
    pub verifier: PathBuf,
    pub linear: PathBuf,
    pub results: PathBuf,
    pub reports: PathBuf,
    pub summary: PathBuf,
}

impl ExperimentPaths {
    pub fn new(root: &Path) -> Self {
        ExperimentPaths {
            root: root.to_path_buf(),
            data: root.join("data"),
            detector: root.join("models/detector.bin"),
            verifier: root.join("models/verifier.bin"),
            linear: root.join("models/linear.bin"),
            results: root.join("results"),
            reports: root.join("reports"),
            summary: root.join("summary.json"),
        }
    }

    pub fn results_file(&self, name: &str) -> PathBuf {
        self.results.join(format!("{name}.jsonl"))
    }

    pub fn report_file(&self, name: &str) -> PathBuf {
        self.reports.join(format!("{name}.report.json"))
    }
}

struct Condition {
    name: &'static str,
    mode: AttackMode,
    adaptive: bool,
    cycles: usize,
}

/// Runs the whole pipeline: dataset, three models, five attack conditions,
/// per-condition evaluation (plus a linear-verifier rescoring of the bounded
/// condition), optional timing, and one summary file.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    root: &Path,
    pool: &rayon::ThreadPool,
    options: &ExperimentOptions,
) -> Result<ExperimentSummary, CliError> {
    cfg.validate()?;
    let paths = ExperimentPaths::new(root);

    cmd_gen_data(cfg, &paths.data)?;
    cmd_train(cfg, Role::Detector, &paths.data, &paths.detector)?;
    cmd_train(cfg, Role::Verifier, &paths.data, &paths.verifier)?;
    cmd_train(cfg, Role::LinearVerifier, &paths.data, &paths.linear)?;

    let conditions = [
        Condition {
            name: "bounded",
            mode: AttackMode::Bounded,
            adaptive: false,
            cycles: 1,
        },
        Condition {
            name: "bounded-adaptive",
            mode: AttackMode::Bounded,
            adaptive: true,
            cycles: 1,
        },
        Condition {
            name: "bounded-adaptive-multi",
            mode: AttackMode::Bounded,
            adaptive: true,
            cycles: cfg.adaptive_cycles,
        },
        Condition {
            name: "patch-fixed",
            mode: AttackMode::PatchFixed,
            adaptive: false,
            cycles: 1,
        },
        Condition {
            name: "patch-variable",
            mode: AttackMode::PatchVariable,
            adaptive: false,
            cycles: 1,
        },
    ];

    let mut summaries = Vec::new();
    let mut bounded_report: Option<EvalReport> = None;
    for cond in &conditions {
        let results = paths.results_file(cond.name);
        cmd_attack(
            cfg,
            &AttackArgs {
                data: &paths.data,
                detector: &paths.detector,
                verifier: &paths.verifier,
                mode: cond.mode,
                adaptive: cond.adaptive,
                cycles: cond.cycles,
                out: &results,
                scenes: None,
            },
            pool,
        )?;
        let report_path = paths.report_file(cond.name);
        let report = cmd_eval(
            cfg,
            &EvalArgs {
                results: &results,
                data: &paths.data,
                verifier: &paths.verifier,
                calibrate_split: "val",
                out: &report_path,
                svg: cond.name == "bounded",
                force: false,
            },
        )?;
        summaries.push(ConditionSummary::from_report(cond.name, &report));
        if cond.name == "bounded" {
            bounded_report = Some(report);
        }
    }

    // The same bounded records, rescored by the linear baseline: how much
    // the convolutional verifier buys.
    let linear_report = cmd_eval(
        cfg,
        &EvalArgs {
            results: &paths.results_file("bounded"),
            data: &paths.data,
            verifier: &paths.linear,
            calibrate_split: "val",
            out: &paths.report_file("bounded-linear"),
            svg: false,
            force: false,
        },
    )?;
    summaries.push(ConditionSummary::from_report(
        "bounded-linear",
        &linear_report,
    ));

    let bench = if options.bench {
        Some(cmd_bench(
            cfg,
            &BenchArgs {
                data: &paths.data,
                detector: &paths.detector,
                verifier: &paths.verifier,
                out: &paths.root.join("bench.json"),
                reps: None,
                scenes: None,
            },
        )?)
    } else {
        None
    };

    let base = bounded_report.expect("bounded condition always runs");
    let summary = ExperimentSummary {
        config_hash: cfg.hash(),
        n_scenes: cfg.n_scenes,
        attack_scenes: cfg.attack_scenes,
        verifier_auc_test: base.calibration.auc_test,
        verifier_tau: base.calibration.tau,
        verifier_test_fpr: base.calibration.test_fpr,
        conditions: summaries,
        bench,
    };
    crate::commands::write_json_pretty(&paths.summary, &summary)?;
    log::info!("experiment complete -> {}", paths.summary.display());
    Ok(summary)
}
