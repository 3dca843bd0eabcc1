//! `mlt`: generate synthetic data, train, evaluate, predict and check
//! gradients.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! command fails while running (including a failed gradient check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlt_core::autodiff::OpKind;
use mlt_core::config::{read_json, RunConfig};
use mlt_core::data::{generate_dataset, Dataset, SyntheticSpec};
use mlt_core::eval::{evaluate, smooth_sequences};
use mlt_core::gradcheck::{run_suite, GradcheckConfig};
use mlt_core::model::load_checkpoint;
use mlt_core::train::{check_dataset, predict_dataset, run};
use mlt_core::util::{write_json, write_tensor};
use mlt_core::Error;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mlt", version, about = "Multi-label transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    GenData {
        /// Synthetic dataset spec (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training dataset directory (overrides data.train).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for checkpoints and the log (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset, with and without smoothing.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run configuration whose `eval` section sets threshold and window.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write raw and smoothed per-frame probabilities.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corrupt the backward rule of one primitive (e.g. `softmax`).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
        /// Report path (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
        } => train(&config, data, out, seed),
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
        } => eval(&checkpoint, &data, config.as_deref(), out.as_deref()),
        Command::Predict {
            checkpoint,
            data,
            config,
            out,
        } => predict(&checkpoint, &data, config.as_deref(), &out),
        Command::Gradcheck {
            config,
            inject_fault,
            out,
            seed,
        } => gradcheck(config.as_deref(), inject_fault.as_deref(), out.as_deref(), seed),
    }
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut spec: SyntheticSpec = match config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let ds = generate_dataset(&spec)?;
    ds.save(out)?;
    println!(
        "wrote {} frames in {} sequences to {}",
        ds.num_samples(),
        ds.sequences.len(),
        out.display()
    );
    Ok(())
}

fn base_dir(config: &Path) -> PathBuf {
    match config.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn train(config: &Path, data: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> CmdResult {
    let mut cfg = RunConfig::load(config)?;
    let cwd = std::env::current_dir().map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(d) = data {
        cfg.data.train = cwd.join(d);
    }
    if let Some(dir) = out {
        let dir = cwd.join(dir);
        cfg.run.log_path = dir.join("train_log.jsonl");
        cfg.run.checkpoint_dir = dir;
    }
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    cfg.validate()?;
    let art = run(&cfg, &base_dir(config))?;
    println!("trained {} steps", art.steps);
    println!("log: {}", art.log_path.display());
    println!("final checkpoint: {}", art.final_checkpoint.display());
    if let Some(p) = &art.best_checkpoint {
        println!("best checkpoint: {}", p.display());
    }
    Ok(())
}

/// Loads a checkpoint and a dataset it can score, and returns eval-mode
/// probabilities.
fn load_and_predict(checkpoint: &Path, data: &Path) -> Result<(Dataset, mlt_core::autodiff::Tensor), Failure> {
    let (params, model) = load_checkpoint(checkpoint)?;
    let ds = Dataset::load(data)?;
    check_dataset(&model, &ds, "input")?;
    let probs = predict_dataset(&params, &model, &ds)?;
    Ok((ds, probs))
}

fn eval(checkpoint: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let cfg = load_run_config(config)?;
    let (ds, probs) = load_and_predict(checkpoint, data)?;
    let report = evaluate(&probs, &ds, cfg.eval.threshold, cfg.eval.window)?;
    match out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    eprintln!(
        "macro F1 {:.4} unsmoothed, {:.4} smoothed (window {})",
        report.unsmoothed.macro_f1, report.smoothed.macro_f1, report.window
    );
    Ok(())
}

/// Sequence boundaries written next to predictions.
#[derive(Serialize)]
struct PredictionIndex<'a> {
    labels: &'a [String],
    window: usize,
    num_samples: usize,
    sequences: &'a [mlt_core::data::Sequence],
    raw: &'a str,
    smoothed: &'a str,
}

const RAW_FILE: &str = "probs.mlt";
const SMOOTHED_FILE: &str = "probs_smoothed.mlt";
const INDEX_FILE: &str = "predictions.json";

fn predict(checkpoint: &Path, data: &Path, config: Option<&Path>, out: &Path) -> CmdResult {
    let cfg = load_run_config(config)?;
    let (ds, probs) = load_and_predict(checkpoint, data)?;
    let smoothed = smooth_sequences(&probs, &ds.sequences, cfg.eval.window)?;
    write_tensor(&out.join(RAW_FILE), &probs)?;
    write_tensor(&out.join(SMOOTHED_FILE), &smoothed)?;
    write_json(
        &out.join(INDEX_FILE),
        &PredictionIndex {
            labels: &ds.labels,
            window: cfg.eval.window,
            num_samples: ds.num_samples(),
            sequences: &ds.sequences,
            raw: RAW_FILE,
            smoothed: SMOOTHED_FILE,
        },
    )?;
    println!("wrote predictions for {} frames to {}", ds.num_samples(), out.display());
    Ok(())
}

fn gradcheck(config: Option<&Path>, fault: Option<&str>, out: Option<&Path>, seed: Option<u64>) -> CmdResult {
    let mut cfg: GradcheckConfig = match config {
        Some(p) => read_json(p)?,
        None => GradcheckConfig::default(),
    };
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    let fault = fault
        .map(|s| s.parse::<OpKind>())
        .transpose()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let report = run_suite(&cfg, fault)?;
    for c in &report.components {
        println!(
            "{:<28} {:>10.3e}  tol {:.0e}  {}",
            c.component,
            c.max_rel_error,
            c.tolerance,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    if report.passed {
        println!("gradcheck passed");
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|c| c.component.as_str()).collect();
        Err(Failure::Runtime(format!("gradcheck failed: {}", failed.join(", "))))
    }
}
