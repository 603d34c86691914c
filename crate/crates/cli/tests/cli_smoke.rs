//! End-to-end checks of the `lane-sentinel` binary: the full command chain on
//! a tiny corpus, artifact shape, and the error surface (exit codes plus the
//! one-line JSON diagnostics on stderr).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lane_sentinel_cli::config::ExperimentConfig;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lane-sentinel"));
    // Keep stderr down to the terminal error line so tests can parse it.
    cmd.env("RUST_LOG", "warn").env_remove("LANE_SENTINEL_JOBS");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn lane-sentinel")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// The last non-empty stderr line must be the machine-readable error object.
fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .unwrap_or_else(|| panic!("no stderr lines, stdout: {:?}", out.stdout));
    serde_json::from_str(line)
        .unwrap_or_else(|e| panic!("stderr line {line:?} is not JSON: {e}"))
}

fn assert_error_kind(out: &Output, kind: &str, what: &str) {
    assert!(!out.status.success(), "{what}: expected failure");
    let err = error_line(out);
    assert_eq!(err["error"], kind, "{what}: wrong kind in {err}");
    assert!(
        err["message"].is_string(),
        "{what}: message missing in {err}"
    );
}

/// A corpus sized for mechanics, not model quality: small frames, short
/// training, few attack iterations.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.scene.width = 192;
    cfg.scene.height = 96;
    cfg.scene.vanishing_row = 30;
    cfg.scene.lane_width_bottom = 9.0;
    cfg.scene.lanes_min = 2;
    cfg.scene.lanes_max = 3;
    cfg.scene.dash_fraction = 0.0;
    cfg.n_scenes = 12;
    cfg.n_train = 8;
    cfg.n_val = 2;
    cfg.detector_train.steps = 30;
    cfg.detector_train.batch = 4;
    cfg.detector_train.crop = 64;
    cfg.detector_train_scenes = 8;
    cfg.verifier_train.epochs = 2;
    cfg.verifier_train.adv_steps = 2;
    cfg.linear_train.epochs = 2;
    cfg.linear_train.adv_steps = 2;
    cfg.attack_bounded.max_iters = 6;
    cfg.attack_patch.max_iters = 6;
    cfg.attack_stage2.max_iters = 4;
    cfg.attack_scenes = 2;
    cfg.adaptive_cycles = 2;
    cfg.bench_reps = 1;
    cfg.bench_scenes = 1;
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_command_chain_produces_coherent_artifacts() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let cfg_path = tiny_config(root);
    let cfg = ExperimentConfig::load(Some(&cfg_path)).unwrap();
    let hash = cfg.hash();
    let data = root.join("data");

    let out = run(bin()
        .args(["gen-data", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&data));
    assert_ok(&out, "gen-data");
    assert!(data.join("manifest.json").is_file());
    let meta = read_json(&data.join("gen-data.meta.json"));
    assert_eq!(meta["command"], "gen-data");
    assert_eq!(meta["config_hash"], Value::String(hash.clone()));
    assert!(meta["wall_ms"].is_u64());

    // Train all three roles; exercise the jobs env override on one of them.
    let detector = root.join("detector.bin");
    let verifier = root.join("verifier.bin");
    let linear = root.join("linear.bin");
    for (role, path) in [
        ("detector", &detector),
        ("verifier", &verifier),
        ("linear-verifier", &linear),
    ] {
        let out = run(bin()
            .env("LANE_SENTINEL_JOBS", "2")
            .args(["train", "--role", role, "--config"])
            .arg(&cfg_path)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(path));
        assert_ok(&out, &format!("train {role}"));
        assert!(path.is_file());
        let meta = read_json(&path.with_extension("bin.meta.json"));
        assert_eq!(meta["config_hash"], Value::String(hash.clone()));
    }

    let results = root.join("bounded.jsonl");
    let out = run(bin()
        .args(["attack", "--mode", "bounded", "--config"])
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .arg("--detector")
        .arg(&detector)
        .arg("--verifier")
        .arg(&verifier)
        .arg("--out")
        .arg(&results));
    assert_ok(&out, "attack bounded");

    let text = fs::read_to_string(&results).unwrap();
    let mut lines = text.lines();
    let header: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["kind"], "attack-results");
    assert_eq!(header["config_hash"], Value::String(hash.clone()));
    assert_eq!(header["mode"], "bounded");
    let records: Vec<Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2, "one record per attacked scene");
    for rec in &records {
        assert!(rec["scene_id"].is_u64());
        assert!(rec["iterations"].is_u64());
        assert!(rec["wall_ms"].is_u64());
        for lane in rec["lanes"].as_array().unwrap() {
            let stab = lane["stab_path"].as_str().unwrap();
            assert!(
                results.parent().unwrap().join(stab).is_file(),
                "stabilized image {stab} missing"
            );
        }
    }

    // A patch attack through the adaptive two-stage path.
    let patch_results = root.join("patch.jsonl");
    let out = run(bin()
        .args([
            "attack",
            "--mode",
            "patch-fixed",
            "--adaptive",
            "--cycles",
            "2",
            "--scenes",
            "1",
            "--config",
        ])
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .arg("--detector")
        .arg(&detector)
        .arg("--verifier")
        .arg(&verifier)
        .arg("--out")
        .arg(&patch_results));
    assert_ok(&out, "attack patch-fixed --adaptive");

    let report_path = root.join("eval.json");
    let out = run(bin()
        .args(["eval", "--svg", "--config"])
        .arg(&cfg_path)
        .arg("--results")
        .arg(&results)
        .arg("--data")
        .arg(&data)
        .arg("--verifier")
        .arg(&verifier)
        .arg("--out")
        .arg(&report_path));
    assert_ok(&out, "eval");
    let report = read_json(&report_path);
    assert_eq!(report["config_hash"], Value::String(hash.clone()));
    assert_eq!(report["results_file"], "bounded.jsonl");
    assert!(report["calibration"]["tau"].is_f64());
    assert!(report["defended"]["fnr"].is_number());
    assert!(report["unprotected"]["fnr"].is_number());
    let svg = fs::read_to_string(report_path.with_extension("svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    // Reports must be location-independent: no absolute paths anywhere.
    let report_text = fs::read_to_string(&report_path).unwrap();
    assert!(
        !report_text.contains(root.to_str().unwrap()),
        "report leaks the experiment directory"
    );

    // Rescoring the same records with the linear verifier also works.
    let out = run(bin()
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .arg("--results")
        .arg(&results)
        .arg("--data")
        .arg(&data)
        .arg("--verifier")
        .arg(&linear)
        .arg("--out")
        .arg(root.join("eval-linear.json")));
    assert_ok(&out, "eval with linear verifier");

    let bench_path = root.join("bench.json");
    let out = run(bin()
        .args(["bench", "--config"])
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .arg("--detector")
        .arg(&detector)
        .arg("--verifier")
        .arg(&verifier)
        .arg("--out")
        .arg(&bench_path));
    assert_ok(&out, "bench");
    let bench = read_json(&bench_path);
    assert!(bench["overhead"].is_number());
    assert!(bench["verify_ms_per_lane"].is_number());

    // Evaluating under a different config must refuse without --force.
    let out = run(bin()
        .args(["eval"])
        .arg("--results")
        .arg(&results)
        .arg("--data")
        .arg(&data)
        .arg("--verifier")
        .arg(&verifier)
        .arg("--out")
        .arg(root.join("eval-mismatch.json")));
    assert_error_kind(&out, "hash-mismatch", "eval with default config");
    let err = error_line(&out);
    assert!(
        err["message"].as_str().unwrap().contains("--force"),
        "hash mismatch should point at --force: {err}"
    );

    let out = run(bin()
        .args(["eval", "--force"])
        .arg("--results")
        .arg(&results)
        .arg("--data")
        .arg(&data)
        .arg("--verifier")
        .arg(&verifier)
        .arg("--out")
        .arg(root.join("eval-forced.json")));
    assert_ok(&out, "eval --force across configs");
}

#[test]
fn gen_data_is_deterministic_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let cfg_path = tiny_config(root);
    for sub in ["a", "b"] {
        let out = run(bin()
            .args(["gen-data", "--scenes", "6", "--seed", "7", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(root.join(sub)));
        assert_ok(&out, "gen-data");
    }
    let manifest_a = fs::read(root.join("a/manifest.json")).unwrap();
    let manifest_b = fs::read(root.join("b/manifest.json")).unwrap();
    assert_eq!(manifest_a, manifest_b, "manifests differ across runs");

    let scene_a: Vec<_> = fs::read_dir(root.join("a/scenes"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert!(!scene_a.is_empty());
    for path in scene_a {
        let twin = root.join("b/scenes").join(path.file_name().unwrap());
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(&twin).unwrap(),
            "{} differs across runs",
            path.display()
        );
    }
}

#[test]
fn eval_rejects_results_without_records() {
    let tmp = TempDir::new().unwrap();
    let results = tmp.path().join("empty.jsonl");
    fs::write(&results, "").unwrap();
    let out = run(bin()
        .args(["eval"])
        .arg("--results")
        .arg(&results)
        .arg("--data")
        .arg(tmp.path())
        .arg("--verifier")
        .arg(tmp.path().join("missing.bin"))
        .arg("--out")
        .arg(tmp.path().join("report.json")));
    assert_error_kind(&out, "no-results", "eval on empty results");
    let err = error_line(&out);
    assert!(
        err["message"].as_str().unwrap().contains("no results in"),
        "unexpected message: {err}"
    );
}

#[test]
fn missing_files_surface_as_io_errors() {
    let tmp = TempDir::new().unwrap();
    let out = run(bin()
        .args(["train", "--role", "detector"])
        .arg("--data")
        .arg(tmp.path().join("nope"))
        .arg("--out")
        .arg(tmp.path().join("det.bin")));
    assert!(!out.status.success());
    let err = error_line(&out);
    assert!(
        err["error"].is_string() && err["message"].is_string(),
        "not machine readable: {err}"
    );
}

#[test]
fn unknown_config_fields_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = tmp.path().join("bad.json");
    fs::write(&cfg_path, r#"{ "n_scenez": 5 }"#).unwrap();
    let out = run(bin()
        .args(["gen-data", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(tmp.path().join("data")));
    assert_error_kind(&out, "json", "config with a typoed field");
}

#[test]
fn zero_jobs_is_rejected_from_flag_and_environment() {
    let tmp = TempDir::new().unwrap();
    for setup in [true, false] {
        let mut cmd = bin();
        if setup {
            cmd.env("LANE_SENTINEL_JOBS", "0");
        } else {
            cmd.args(["--jobs", "0"]);
        }
        let out = run(cmd
            .args(["gen-data", "--scenes", "4"])
            .arg("--out")
            .arg(tmp.path().join("data")));
        assert_error_kind(&out, "argument", "zero worker count");
    }
}

#[test]
fn cycles_outside_the_supported_range_fail_fast() {
    let tmp = TempDir::new().unwrap();
    let out = run(bin()
        .args(["attack", "--mode", "bounded", "--adaptive", "--cycles", "5"])
        .arg("--data")
        .arg(tmp.path())
        .arg("--detector")
        .arg(tmp.path().join("d.bin"))
        .arg("--verifier")
        .arg(tmp.path().join("v.bin"))
        .arg("--out")
        .arg(tmp.path().join("r.jsonl")));
    // Clap rejects the value before the command runs.
    assert!(!out.status.success());
}

#[test]
fn model_files_are_checked_by_kind() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let cfg_path = tiny_config(root);
    let data = root.join("data");
    let out = run(bin()
        .args(["gen-data", "--scenes", "6", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&data));
    assert_ok(&out, "gen-data");
    let detector = root.join("det.bin");
    let out = run(bin()
        .args(["train", "--role", "detector", "--config"])
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&detector));
    assert_ok(&out, "train detector");

    // A detector file where a verifier is expected must be refused.
    let out = run(bin()
        .args(["attack", "--mode", "bounded", "--config"])
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .arg("--detector")
        .arg(&detector)
        .arg("--verifier")
        .arg(&detector)
        .arg("--out")
        .arg(root.join("r.jsonl")));
    assert_error_kind(&out, "neural", "detector passed as verifier");
}
