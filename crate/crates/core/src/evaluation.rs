//! Coverage and region-size metrics, and the multi-seed experiment runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Method};
use crate::data::{self, write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::pipeline::{Assessment, Predictor, TrainedModel};

/// Fraction of covered pairs.
pub fn coverage(assessments: &[Assessment]) -> Result<f64> {
    if assessments.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    Ok(assessments.iter().filter(|a| a.covered).count() as f64 / assessments.len() as f64)
}

/// Mean region area in target units.
pub fn pinaw(assessments: &[Assessment]) -> Result<f64> {
    if assessments.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    Ok(assessments.iter().map(|a| a.area).sum::<f64>() / assessments.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub dataset: String,
    pub alpha: f64,
    pub seed: u64,
    pub coverage: f64,
    /// Mean region area, raw target units.
    pub pinaw: f64,
    /// `pinaw` divided by the product of training-target standard
    /// deviations, i.e. area in standardized units.
    pub pinaw_normalized: f64,
    pub final_k: Option<usize>,
    pub q_hat: Option<f64>,
    pub crossing_rate: Option<f64>,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

/// Metrics for a calibrated predictor on `test`.
pub fn evaluate(
    predictor: &Predictor<'_>,
    test: &Dataset,
    target_std: &[f64],
) -> Result<(f64, f64, f64, Vec<Assessment>)> {
    let assessments = predictor.assess_all(&test.features, &test.targets)?;
    let cov = coverage(&assessments)?;
    let p = pinaw(&assessments)?;
    Ok((cov, p, p / target_std.iter().product::<f64>(), assessments))
}

/// Train once, then calibrate and evaluate at each alpha.
fn run_unit(
    cfg: &Config,
    method: Method,
    alphas: &[f64],
    seed: u64,
    splits: &data::Splits,
) -> Result<Vec<(MetricsReport, Vec<Assessment>)>> {
    let started = Instant::now();
    let model = TrainedModel::train(method, &splits.train, &cfg.train, alphas[0], seed)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let mut out = Vec::new();
    for &alpha in alphas {
        let t = Instant::now();
        let cal = model.calibrate(&splits.cal, alpha)?;
        let predictor = model.predictor(&cal)?;
        let (cov, p, p_norm, assessments) = evaluate(&predictor, &splits.test, model.target_std())?;
        let (q_hat, crossing_rate) = match (&model, &cal) {
            (TrainedModel::Cqr(m), _) => (None, Some(m.crossing_rate)),
            (_, crate::pipeline::Calibration::Density(c)) => (Some(c.q_hat), None),
            _ => (None, None),
        };
        out.push((
            MetricsReport {
                method,
                dataset: cfg_dataset_name(splits),
                alpha,
                seed,
                coverage: cov,
                pinaw: p,
                pinaw_normalized: p_norm,
                final_k: model.k(),
                q_hat,
                crossing_rate,
                runtime_seconds: train_seconds + t.elapsed().as_secs_f64(),
            },
            assessments,
        ));
    }
    Ok(out)
}

fn cfg_dataset_name(splits: &data::Splits) -> String {
    splits
        .train
        .name
        .strip_suffix("-train")
        .unwrap_or(&splits.train.name)
        .to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub method: Method,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub error: String,
    pub exit_code: u8,
}

/// Mean and sample standard deviation over seeds of one (method, alpha).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub method: Method,
    pub alpha: f64,
    pub runs: usize,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub pinaw_mean: f64,
    pub pinaw_std: f64,
    pub pinaw_normalized_mean: f64,
    pub pinaw_normalized_std: f64,
    pub final_k_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<RunFailure>,
    pub table: Vec<AggregateRow>,
    /// Per-report test assessments, aligned with `reports`.
    pub assessments: Vec<Vec<Assessment>>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(reports: &[MetricsReport]) -> Vec<AggregateRow> {
    let mut cells: BTreeMap<(String, Method, u64), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        cells
            .entry((r.dataset.clone(), r.method, r.alpha.to_bits()))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<AggregateRow> = cells
        .into_iter()
        .map(|((dataset, method, alpha_bits), rs)| {
            let pick = |f: fn(&MetricsReport) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (coverage_mean, coverage_std) = mean_std(&pick(|r| r.coverage));
            let (pinaw_mean, pinaw_std) = mean_std(&pick(|r| r.pinaw));
            let (pinaw_normalized_mean, pinaw_normalized_std) =
                mean_std(&pick(|r| r.pinaw_normalized));
            let ks: Vec<f64> = rs.iter().filter_map(|r| r.final_k.map(|k| k as f64)).collect();
            AggregateRow {
                dataset,
                method,
                alpha: f64::from_bits(alpha_bits),
                runs: rs.len(),
                coverage_mean,
                coverage_std,
                pinaw_mean,
                pinaw_std,
                pinaw_normalized_mean,
                pinaw_normalized_std,
                final_k_mean: (!ks.is_empty()).then(|| mean_std(&ks).0),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.dataset.as_str(), a.method)
            .cmp(&(b.dataset.as_str(), b.method))
            .then(a.alpha.total_cmp(&b.alpha))
    });
    rows
}

/// Runs every (method, seed) unit of the suite. Density methods train once
/// per seed and are calibrated at every alpha; CQR trains per alpha.
/// Failed units are recorded and skipped.
pub fn run_suite(cfg: &Config) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let ds = cfg.dataset.load()?;
    info!("suite '{}': dataset {} with {} rows", cfg.name, ds.name, ds.len());
    let suite = &cfg.suite;
    let splits = suite
        .seeds
        .iter()
        .map(|&s| data::split(&ds, &cfg.split.with_seed(s)))
        .collect::<Result<Vec<_>>>()?;

    let mut units: Vec<(Method, u64, usize, Vec<f64>)> = Vec::new();
    for &method in &suite.methods {
        for (si, &seed) in suite.seeds.iter().enumerate() {
            if method == Method::Cqr {
                for &a in &suite.alphas {
                    units.push((method, seed, si, vec![a]));
                }
            } else {
                units.push((method, seed, si, suite.alphas.clone()));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(suite.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        units
            .par_iter()
            .map(|(method, seed, si, alphas)| {
                let r = run_unit(cfg, *method, alphas, *seed, &splits[*si]);
                match &r {
                    Ok(_) => info!("{method} seed {seed} done"),
                    Err(e) => error!("{method} seed {seed} failed: {e}"),
                }
                r
            })
            .collect()
    });

    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    for ((method, seed, _, alphas), r) in units.iter().zip(results) {
        match r {
            Ok(v) => pairs.extend(v),
            Err(e) => failures.push(RunFailure {
                method: *method,
                seed: *seed,
                alphas: alphas.clone(),
                error: e.to_string(),
                exit_code: e.kind().exit_code(),
            }),
        }
    }
    pairs.sort_by(|(a, _), (b, _)| {
        a.method
            .cmp(&b.method)
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.seed.cmp(&b.seed))
    });
    let (reports, assessments): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let table = aggregate(&reports);
    Ok(SuiteOutcome {
        reports,
        failures,
        table,
        assessments,
    })
}

/// Formats `v` with four significant digits.
pub fn sig4(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = 3 - magnitude;
    if decimals >= 0 {
        format!("{v:.prec$}", prec = decimals as usize)
    } else {
        let unit = 10f64.powi(-decimals);
        format!("{:.0}", (v / unit).round() * unit)
    }
}

pub fn results_csv(table: &[AggregateRow]) -> String {
    let mut s = String::from(
        "dataset,method,alpha,runs,coverage_mean,coverage_std,pinaw_mean,pinaw_std,pinaw_normalized_mean,pinaw_normalized_std,final_k_mean\n",
    );
    for r in table {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.dataset,
            r.method,
            r.alpha,
            r.runs,
            sig4(r.coverage_mean),
            sig4(r.coverage_std),
            sig4(r.pinaw_mean),
            sig4(r.pinaw_std),
            sig4(r.pinaw_normalized_mean),
            sig4(r.pinaw_normalized_std),
            r.final_k_mean.map(sig4).unwrap_or_default(),
        );
    }
    s
}

pub fn run_id(r: &MetricsReport) -> String {
    format!("{}_a{}_s{}", r.method, r.alpha, r.seed)
}

/// Writes `results.csv`, `runs.jsonl`, `failures.jsonl` (when needed),
/// `timings.jsonl` and, if enabled, `regions_<run>.csv` files into `dir`.
pub fn write_outcome(outcome: &SuiteOutcome, dir: &Path, write_regions: bool) -> Result<()> {
    write_atomic(&dir.join("results.csv"), results_csv(&outcome.table).as_bytes())?;
    let mut runs = String::new();
    let mut timings = String::new();
    for r in &outcome.reports {
        runs.push_str(&serde_json::to_string(r)?);
        runs.push('\n');
        let _ = writeln!(
            timings,
            "{}",
            serde_json::json!({"run": run_id(r), "runtime_seconds": r.runtime_seconds})
        );
    }
    write_atomic(&dir.join("runs.jsonl"), runs.as_bytes())?;
    write_atomic(&dir.join("timings.jsonl"), timings.as_bytes())?;
    if !outcome.failures.is_empty() {
        let mut f = String::new();
        for fail in &outcome.failures {
            f.push_str(&serde_json::to_string(fail)?);
            f.push('\n');
        }
        write_atomic(&dir.join("failures.jsonl"), f.as_bytes())?;
    }
    if write_regions {
        for (r, a) in outcome.reports.iter().zip(&outcome.assessments) {
            write_atomic(
                &dir.join(format!("regions_{}.csv", run_id(r))),
                regions_csv(a).as_bytes(),
            )?;
        }
    }
    Ok(())
}

pub fn regions_csv(assessments: &[Assessment]) -> String {
    let mut s = String::from("row,assigned_region,covered,region_size,area\n");
    for (i, a) in assessments.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{:?}",
            a.assigned.map(|k| k.to_string()).unwrap_or_default(),
            u8::from(a.covered),
            a.size,
            a.area
        );
    }
    s
}
