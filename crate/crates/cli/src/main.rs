use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lane_sentinel_cli::commands::{
    cmd_attack, cmd_bench, cmd_eval, cmd_gen_data, cmd_train, AttackArgs, AttackMode, BenchArgs,
    EvalArgs, Role,
};
use lane_sentinel_cli::config::ExperimentConfig;
use lane_sentinel_cli::error::CliError;
use lane_sentinel_cli::experiment::{run_experiment, ExperimentOptions};
use lane_sentinel_cli::jobs::{build_pool, resolve_jobs};

/// Lane verification defense toolkit: synthesize road scenes, train the
/// detector and verifiers, attack the detector, and measure how much of the
/// attack the verifier catches.
#[derive(Parser)]
#[command(name = "lane-sentinel", version, disable_help_subcommand = true)]
struct Cli {
    /// Experiment config JSON; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (LANE_SENTINEL_JOBS overrides).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic scene and stabilized-lane corpus.
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured scene count.
        #[arg(long)]
        scenes: Option<u64>,
        /// Override the configured base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model from a dataset.
    Train {
        #[arg(long, value_enum)]
        role: Role,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack test scenes and record what the detector then reports.
    Attack {
        #[arg(long, value_enum)]
        mode: AttackMode,
        /// Interleave verifier-aware refinement with the detector attack.
        #[arg(long)]
        adaptive: bool,
        /// Adaptive cycles; budgets are split evenly across them.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=4))]
        cycles: u8,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        /// Verifier that scores the recorded lanes (and that the adaptive
        /// attack optimizes against).
        #[arg(long)]
        verifier: PathBuf,
        /// Output results file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Override the configured number of attacked scenes.
        #[arg(long)]
        scenes: Option<usize>,
        /// Override the perturbation radius (bounded mode).
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Calibrate a threshold and score recorded attacks against it.
    Eval {
        /// Results file written by the attack command.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Verifier to rescore the recorded lanes with.
        #[arg(long)]
        verifier: PathBuf,
        /// Split the threshold is calibrated on (train or val).
        #[arg(long, default_value = "val")]
        calibrate_split: String,
        /// Output report file (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Also write an SVG error-tradeoff chart next to the report.
        #[arg(long)]
        svg: bool,
        /// Evaluate even when config hashes disagree.
        #[arg(long)]
        force: bool,
    },
    /// Measure the runtime cost of verification on top of detection.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        verifier: PathBuf,
        /// Timing repetitions (median is reported).
        #[arg(long)]
        reps: Option<usize>,
        /// Scenes per repetition.
        #[arg(long)]
        scenes: Option<usize>,
        /// Output report file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run everything: dataset, models, attacks, evals, bench, summary.
    RunAll {
        /// Experiment root directory.
        #[arg(long)]
        out: PathBuf,
        /// Skip the timing benchmark.
        #[arg(long)]
        no_bench: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let jobs = resolve_jobs(cli.jobs)?;
    let pool = build_pool(jobs)?;

    match cli.command {
        Command::GenData { out, scenes, seed } => {
            if let Some(n) = scenes {
                cfg.n_scenes = n;
                let held_out = cfg.n_val.min(n / 5).max(1);
                // Keep the splits inside the shrunken corpus, test last.
                if cfg.n_train + cfg.n_val + 1 > n {
                    cfg.n_val = held_out;
                    cfg.n_train = n.saturating_sub(2 * held_out);
                }
                let test = n.saturating_sub(cfg.n_train + cfg.n_val) as usize;
                cfg.attack_scenes = cfg.attack_scenes.min(test);
                cfg.bench_scenes = cfg.bench_scenes.min(test);
            }
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            cfg.validate()?;
            cmd_gen_data(&cfg, &out)?;
        }
        Command::Train { role, data, out } => {
            cmd_train(&cfg, role, &data, &out)?;
        }
        Command::Attack {
            mode,
            adaptive,
            cycles,
            data,
            detector,
            verifier,
            out,
            scenes,
            eps,
        } => {
            if let Some(e) = eps {
                if !(e > 0.0) {
                    return Err(CliError::Arg(format!("eps {e} must be positive")));
                }
                let ratio = cfg.attack_bounded.step / cfg.attack_bounded.eps;
                cfg.attack_bounded.eps = e;
                cfg.attack_bounded.step = e * ratio;
            }
            cmd_attack(
                &cfg,
                &AttackArgs {
                    data: &data,
                    detector: &detector,
                    verifier: &verifier,
                    mode,
                    adaptive,
                    cycles: cycles as usize,
                    out: &out,
                    scenes,
                },
                &pool,
            )?;
        }
        Command::Eval {
            results,
            data,
            verifier,
            calibrate_split,
            out,
            svg,
            force,
        } => {
            cmd_eval(
                &cfg,
                &EvalArgs {
                    results: &results,
                    data: &data,
                    verifier: &verifier,
                    calibrate_split: &calibrate_split,
                    out: &out,
                    svg,
                    force,
                },
            )?;
        }
        Command::Bench {
            data,
            detector,
            verifier,
            reps,
            scenes,
            out,
        } => {
            cmd_bench(
                &cfg,
                &BenchArgs {
                    data: &data,
                    detector: &detector,
                    verifier: &verifier,
                    out: &out,
                    reps,
                    scenes,
                },
            )?;
        }
        Command::RunAll { out, no_bench } => {
            run_experiment(&cfg, &out, &pool, &ExperimentOptions { bench: !no_bench })?;
        }
    }
    Ok(())
}
