//! `chdqr` command-line entry point.
//!
//! Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. On failure a single JSON line `{"error": ..., "kind": ...,
//! "exit_code": ...}` goes to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use chdqr::checkpoint;
use chdqr::config::Config;
use chdqr::data::{self, write_atomic, Dataset};
use chdqr::error::{Error, Result};
use chdqr::evaluation::{self, MetricsReport};
use chdqr::pipeline::{Calibration, Predictor, TrainedModel};
use chdqr::Method;

#[derive(Parser, Debug)]
#[command(name = "chdqr", version, about = "Conformal high-density prediction regions")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set train.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    workers: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Generator {
    Uncond1d,
    Uncond2d,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as CSV plus a provenance sidecar.
    GenData {
        dataset: Generator,
        #[arg(long)]
        n: Option<usize>,
        /// Outliers per far component (2D only).
        #[arg(long, default_value_t = 0)]
        outliers: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Split the configured dataset and train the configured method.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate a checkpoint on a calibration split.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Calibration CSV.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Coverage and region size on a test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        /// Test CSV.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run every method, alpha and seed of the suite configuration.
    Suite {
        #[command(flatten)]
        common: Common,
    },
    /// Print the prediction region for one input.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        /// Comma-separated feature values.
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        /// Include every kept cell's geometry.
        #[arg(long)]
        cells: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let kind = e.kind();
            eprintln!(
                "{}",
                json!({"error": e.to_string(), "kind": kind.name(), "exit_code": kind.exit_code()})
            );
            ExitCode::from(kind.exit_code())
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::GenData {
            dataset,
            n,
            outliers,
            common,
        } => gen_data(dataset, n, outliers, &common),
        Command::Train { common } => train(&common),
        Command::Calibrate {
            checkpoint,
            data,
            alpha,
            common,
        } => calibrate(&checkpoint, &data, alpha, &common),
        Command::Evaluate {
            checkpoint,
            calibration,
            data,
            common,
        } => evaluate(&checkpoint, &calibration, &data, &common),
        Command::Suite { common } => suite(&common),
        Command::Predict {
            checkpoint,
            calibration,
            x,
            cells,
        } => predict(&checkpoint, &calibration, &x, cells),
    }
}

/// File config plus `--set` flags plus the dedicated flags, in that order.
fn load_config(common: &Common, extra: &[String]) -> Result<Config> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("suite.workers={w}"));
    }
    overrides.extend_from_slice(extra);
    Config::load(common.config.as_deref(), &overrides)
}

/// Writes the effective configuration and a version stamp.
fn stamp(out: &Path, cfg: &Config, command: &str) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("config.json"), cfg.to_json()?.as_bytes())?;
    let stamp = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "git": git_revision(),
        "config_sha256": cfg.hash()?,
    });
    write_atomic(
        &out.join("version.json"),
        serde_json::to_string_pretty(&stamp)?.as_bytes(),
    )
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn gen_data(gen: Generator, n: Option<usize>, outliers: usize, common: &Common) -> Result<u8> {
    let seed = common.seed.unwrap_or(0);
    let ds = match gen {
        Generator::Uncond1d => {
            if outliers > 0 {
                return Err(Error::Config("outliers need the 2D generator".into()));
            }
            data::gen_uncond1d(n.unwrap_or(10_000), seed)?
        }
        Generator::Uncond2d => {
            let base = data::gen_uncond2d(n.unwrap_or(30_000), seed)?;
            if outliers > 0 {
                data::add_outliers(&base, outliers, seed)?
            } else {
                base
            }
        }
    };
    let path = common.out.join(format!("{}.csv", ds.name));
    data::write_csv(&ds, &path)?;
    info!("wrote {} rows to {}", ds.len(), path.display());
    Ok(0)
}

fn target_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("y{j}")).collect()
}

fn train(common: &Common) -> Result<u8> {
    let cfg = load_config(common, &[])?;
    let out = &common.out;
    stamp(out, &cfg, "train")?;
    let ds = cfg.dataset.load()?;
    let splits = data::split(&ds, &cfg.split.with_seed(cfg.seed))?;
    for (name, part) in [
        ("train", &splits.train),
        ("cal", &splits.cal),
        ("test", &splits.test),
    ] {
        data::write_csv(part, &out.join("splits").join(format!("{name}.csv")))?;
    }
    info!(
        "training {} on {} rows (seed {})",
        cfg.method,
        splits.train.len(),
        cfg.seed
    );
    let model = TrainedModel::train(cfg.method, &splits.train, &cfg.train, cfg.alpha, cfg.seed)?;
    checkpoint::save(&out.join("model.ckpt"), &model, &cfg.hash()?)?;
    let mut log = String::new();
    if let TrainedModel::Density { history, .. } = &model {
        for rec in history {
            log.push_str(&serde_json::to_string(rec)?);
            log.push('\n');
        }
    }
    write_atomic(&out.join("train_log.jsonl"), log.as_bytes())?;
    info!("final K: {:?}", model.k());
    Ok(0)
}

fn load_split(path: &Path, model: &TrainedModel, features: usize) -> Result<Dataset> {
    let names: Vec<String> = (0..features).map(|j| format!("x{j}")).collect();
    data::load_csv(path, &target_names(model.target_std().len()), Some(&names))
}

fn input_dim(model: &TrainedModel) -> usize {
    match model {
        TrainedModel::Density { model, .. } => model.net.input_dim(),
        TrainedModel::Cqr(m) => m.net.input_dim(),
    }
}

fn calibrate(ckpt: &Path, data: &Path, alpha: Option<f64>, common: &Common) -> Result<u8> {
    let extra: Vec<String> = alpha.map(|a| format!("alpha={a}")).into_iter().collect();
    let cfg = load_config(common, &extra)?;
    let (model, header) = checkpoint::load(ckpt)?;
    let alpha = match (&model, alpha) {
        (TrainedModel::Cqr(m), None) => m.alpha,
        _ => cfg.alpha,
    };
    let cal = load_split(data, &model, input_dim(&model))?;
    let result = model.calibrate(&cal, alpha)?;
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    write_atomic(
        &common.out.join("version.json"),
        serde_json::to_string_pretty(&json!({
            "command": "calibrate",
            "version": env!("CARGO_PKG_VERSION"),
            "git": git_revision(),
            "checkpoint_config_sha256": header.config_hash,
            "alpha": alpha,
        }))?
        .as_bytes(),
    )?;
    checkpoint::save_calibration(&common.out.join("calibration.json"), &result)?;
    info!("calibrated at alpha {alpha} on {} rows", cal.len());
    Ok(0)
}

fn evaluate(ckpt: &Path, calibration: &Path, data: &Path, common: &Common) -> Result<u8> {
    let (model, header) = checkpoint::load(ckpt)?;
    let cal = checkpoint::load_calibration(calibration)?;
    let predictor = model.predictor(&cal)?;
    let test = load_split(data, &model, input_dim(&model))?;
    let (coverage, pinaw, pinaw_normalized, assessments) =
        evaluation::evaluate(&predictor, &test, model.target_std())?;
    let (q_hat, crossing_rate) = match (&cal, &model) {
        (Calibration::Density(c), _) => (Some(c.q_hat), None),
        (_, TrainedModel::Cqr(m)) => (None, Some(m.crossing_rate)),
        _ => (None, None),
    };
    let report = MetricsReport {
        method: model.method(),
        dataset: test.name.clone(),
        alpha: cal.alpha(),
        seed: common.seed.unwrap_or(0),
        coverage,
        pinaw,
        pinaw_normalized,
        final_k: model.k(),
        q_hat,
        crossing_rate,
        runtime_seconds: 0.0,
    };
    let out = &common.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(
        &out.join("metrics.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    write_atomic(
        &out.join(format!("regions_{}.csv", evaluation::run_id(&report))),
        evaluation::regions_csv(&assessments).as_bytes(),
    )?;
    write_atomic(
        &out.join("version.json"),
        serde_json::to_string_pretty(&json!({
            "command": "evaluate",
            "version": env!("CARGO_PKG_VERSION"),
            "git": git_revision(),
            "checkpoint_config_sha256": header.config_hash,
        }))?
        .as_bytes(),
    )?;
    info!("coverage {coverage:.4}, PINAW {pinaw:.4}");
    Ok(0)
}

fn suite(common: &Common) -> Result<u8> {
    let extra: Vec<String> = common
        .seed
        .map(|s| format!("suite.seeds=[{s}]"))
        .into_iter()
        .collect();
    let cfg = load_config(common, &extra)?;
    stamp(&common.out, &cfg, "suite")?;
    let outcome = evaluation::run_suite(&cfg)?;
    evaluation::write_outcome(&outcome, &common.out, cfg.suite.write_regions)?;
    for row in &outcome.table {
        info!(
            "{:<14} alpha {:<4} coverage {} PINAW {}",
            row.method,
            row.alpha,
            evaluation::sig4(row.coverage_mean),
            evaluation::sig4(row.pinaw_mean)
        );
    }
    Ok(outcome
        .failures
        .iter()
        .map(|f| f.exit_code)
        .max()
        .unwrap_or(0))
}

fn predict(ckpt: &Path, calibration: &Path, x: &str, cells: bool) -> Result<u8> {
    let (model, _) = checkpoint::load(ckpt)?;
    let cal = checkpoint::load_calibration(calibration)?;
    let x: Vec<f64> = x
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("feature value '{v}' is not a number")))
        })
        .collect::<Result<_>>()?;
    let record = match model.predictor(&cal)? {
        Predictor::Density { model, q_hat } => {
            let region = model.predict_region(&x, q_hat)?;
            let geometry = if cells {
                let all = model.protos.voronoi_cells()?;
                Some(
                    region
                        .indices
                        .iter()
                        .map(|&i| json!({"index": i, "prototype": model.protos.get(i), "cell": cell_json(&all[i])}))
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            json!({
                "method": cal_method(&cal),
                "q_hat": q_hat,
                "regions": region.indices,
                "cumulative_prob": region.cumulative_prob,
                "area": region.total_area,
                "box_volume": model.protos.bbox().volume(),
                "cells": geometry,
            })
        }
        Predictor::Cqr { model, cal } => {
            let region = chdqr::baselines::cqr_predict(model, cal, &x)?;
            json!({
                "method": Method::Cqr,
                "lower": region.lower,
                "upper": region.upper,
                "area": region.area(),
                "crossed": region.crossed,
            })
        }
    };
    println!("{}", serde_json::to_string(&record)?);
    Ok(0)
}

fn cal_method(cal: &Calibration) -> &'static str {
    match cal {
        Calibration::Density(_) => "density",
        Calibration::Cqr(_) => "cqr",
    }
}

fn cell_json(cell: &chdqr::VoronoiCell) -> serde_json::Value {
    match &cell.geometry {
        chdqr::geometry::CellGeometry::Interval { lo, hi } => json!([lo, hi]),
        chdqr::geometry::CellGeometry::Polygon(vertices) => json!(vertices),
    }
}
