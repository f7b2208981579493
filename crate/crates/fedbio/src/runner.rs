//! Experiment execution and summaries.
//!
//! [`run_experiment`] performs one run per seed (and per outer step when an
//! `eta_grid` is given), writing for each run `<name>.ndjson`, `<name>.csv`
//! and `<name>.result.json` into the output directory. Afterwards it writes
//! `summary.csv` with the mean and sample standard deviation of every final
//! metric, and `failures.csv` listing any run that errored. Failed runs are
//! left out of the statistics, so `n_seeds` below the seed count marks an
//! incomplete row.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedbio_core::dataset::TabularDataset;
use fedbio_core::diagnostics::{self, MetricsRecord, MetricsSink};
use fedbio_core::engine::{RunConfig, RunResult, SimplexConstraint, Simulation};
use fedbio_core::problems::fairfl::{
    prepare_federated, synthetic_two_group, weighted_fedavg, FederatedSplit,
};
use fedbio_core::problems::{make_quadratic, FairFlOracle};
use fedbio_core::{RngStream, Vector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ProblemKind};
use crate::data::{load_csv, DataError};
use crate::logio::{self, LogError, LogMetadata, NdjsonSink};

/// RNG stream ids for data generation and splitting; client streams use `0..M`.
const DATA_STREAM: u64 = 1 << 32;
const SPLIT_STREAM: u64 = (1 << 32) + 1;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILURES_FILE: &str = "failures.csv";
const RESULT_SUFFIX: &str = ".result.json";

/// Distribution column value for problems without a data split.
pub const NO_DISTRIBUTION: &str = "-";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] fedbio_core::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{dir}: no result files found")]
    NoResults { dir: PathBuf },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Final metrics of one run, stored as `<name>.result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_name: String,
    pub method: String,
    pub distribution: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub method: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub distribution: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    /// Groups results by (method, distribution, metric), in sorted order.
    pub fn from_results(results: &[RunSummary]) -> Self {
        let mut groups: BTreeMap<(&str, &str, &str), Vec<f64>> = BTreeMap::new();
        for r in results {
            for (metric, value) in &r.metrics {
                groups
                    .entry((&r.method, &r.distribution, metric))
                    .or_default()
                    .push(*value);
            }
        }
        let rows = groups
            .into_iter()
            .map(|((method, distribution, metric), values)| {
                let (mean, std) = mean_std(&values);
                SummaryRow {
                    method: method.into(),
                    distribution: distribution.into(),
                    metric: metric.into(),
                    mean,
                    std,
                    n_seeds: values.len(),
                }
            })
            .collect();
        SummaryTable { rows }
    }

    pub fn get(&self, method: &str, metric: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.metric == metric)
    }
}

/// Mean and sample standard deviation (`n - 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Everything a finished experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub summary: SummaryTable,
    pub results: Vec<RunSummary>,
    pub failures: Vec<RunFailure>,
}

pub fn emit_summary(table: &SummaryTable, path: &Path) -> Result<(), RunError> {
    let csv_err = |source| RunError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(File::create(path).map_err(io_err(path))?);
    w.write_record(["method", "distribution", "metric", "mean", "std", "n_seeds"])
        .map_err(csv_err)?;
    for r in &table.rows {
        w.write_record([
            r.method.clone(),
            r.distribution.clone(),
            r.metric.clone(),
            format!("{:?}", r.mean),
            format!("{:?}", r.std),
            r.n_seeds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_summary(path: &Path) -> Result<SummaryTable, RunError> {
    let csv_err = |source| RunError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<SummaryRow>, _>>()
        .map_err(csv_err)?;
    Ok(SummaryTable { rows })
}

fn write_failures(failures: &[RunFailure], path: &Path) -> Result<(), RunError> {
    let csv_err = |source| RunError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(File::create(path).map_err(io_err(path))?);
    w.write_record(["method", "seed", "error"])
        .map_err(csv_err)?;
    for f in failures {
        w.write_record([f.method.clone(), f.seed.to_string(), f.error.clone()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Rebuilds the summary from the `*.result.json` files in `dir`.
pub fn summarize_dir(dir: &Path) -> Result<SummaryTable, RunError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(RESULT_SUFFIX)))
        .collect();
    if paths.is_empty() {
        return Err(RunError::NoResults {
            dir: dir.to_path_buf(),
        });
    }
    paths.sort();
    let results = paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|source| RunError::Json {
                path: p.clone(),
                source,
            })
        })
        .collect::<Result<Vec<RunSummary>, _>>()?;
    Ok(SummaryTable::from_results(&results))
}

/// Writes to the NDJSON log while keeping the records for the CSV export.
struct LogSink {
    ndjson: NdjsonSink,
    records: Vec<MetricsRecord>,
}

impl MetricsSink for LogSink {
    fn record(&mut self, record: &MetricsRecord) {
        self.ndjson.record(record);
        self.records.push(record.clone());
    }
}

/// One method's run on one seed.
struct RunContext<'a> {
    experiment: &'a ExperimentConfig,
    out_dir: &'a Path,
    method: String,
    distribution: &'a str,
    seed: u64,
}

impl RunContext<'_> {
    fn run_name(&self) -> String {
        let mut name = format!("{}_{}", self.experiment.problem.name(), self.method);
        if self.distribution != NO_DISTRIBUTION {
            name.push('_');
            name.push_str(self.distribution);
        }
        format!("{name}_seed{}", self.seed)
    }

    /// Runs `body` with a log sink and writes the log, CSV and result files.
    fn logged<F>(&self, run_cfg: &RunConfig, body: F) -> Result<RunSummary, RunError>
    where
        F: FnOnce(
            &dyn Fn() -> u64,
            &mut dyn MetricsSink,
        ) -> Result<BTreeMap<String, f64>, RunError>,
    {
        let name = self.run_name();
        let meta = LogMetadata::new(
            name.clone(),
            self.seed,
            serde_json::to_value(run_cfg).expect("run config serializes"),
            serde_json::to_value(self.experiment).expect("experiment config serializes"),
        );
        let mut sink = LogSink {
            ndjson: NdjsonSink::create(&self.out_dir.join(format!("{name}.ndjson")), &meta)?,
            records: Vec::new(),
        };
        let start = Instant::now();
        let clock = move || start.elapsed().as_nanos() as u64;
        let metrics = body(&clock, &mut sink)?;
        let LogSink { ndjson, records } = sink;
        ndjson.finish()?;
        logio::write_csv_log(&records, &self.out_dir.join(format!("{name}.csv")))?;
        let summary = RunSummary {
            run_name: name.clone(),
            method: self.method.clone(),
            distribution: self.distribution.into(),
            seed: self.seed,
            metrics,
        };
        let path = self.out_dir.join(format!("{name}{RESULT_SUFFIX}"));
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(summary)
    }
}

fn last_record_metrics(records: &[MetricsRecord]) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if let Some(r) = records.last() {
        m.insert("final_grad_norm_sq".into(), r.grad_norm_sq);
        m.insert("final_outer_loss".into(), r.outer_loss);
        m.insert("final_consensus_error".into(), r.consensus_error);
    }
    m
}

/// Method name and run configuration for each outer step of the sweep.
fn method_configs(cfg: &ExperimentConfig, seed: u64) -> Vec<(String, RunConfig)> {
    let base = RunConfig {
        seed,
        ..cfg.run.clone()
    };
    match &cfg.eta_grid {
        None => vec![(base.algorithm.name().to_string(), base)],
        Some(grid) => grid
            .iter()
            .map(|&eta| {
                let name = format!("{}_eta{eta}", base.algorithm.name());
                (
                    name,
                    RunConfig {
                        eta_outer: eta,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}

fn run_quadratic_seed(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
) -> Vec<Result<RunSummary, RunFailure>> {
    let problem = make_quadratic(&cfg.quadratic.family_spec(cfg.run.num_clients, seed));
    method_configs(cfg, seed)
        .into_iter()
        .map(|(method, run_cfg)| {
            let ctx = RunContext {
                experiment: cfg,
                out_dir,
                method: method.clone(),
                distribution: NO_DISTRIBUTION,
                seed,
            };
            let result = problem
                .as_ref()
                .map_err(|e| RunError::Core(e.clone()))
                .and_then(|(oracles, truth)| {
                    ctx.logged(&run_cfg, |clock, sink| {
                        let sim = Simulation::new(&run_cfg, oracles)?
                            .with_ground_truth(truth)
                            .with_clock(clock);
                        let x1 = Vector::zeros(cfg.quadratic.dim_x);
                        let y1 = Vector::zeros(cfg.quadratic.dim_y);
                        let result = sim.run(&x1, &y1, sink)?;
                        Ok(last_record_metrics(&result.records))
                    })
                });
            result.map_err(|e| RunFailure {
                method,
                seed,
                error: e.to_string(),
            })
        })
        .collect()
}

fn fairness_metrics(
    model: &Vector,
    split: &FederatedSplit,
) -> Result<BTreeMap<String, f64>, RunError> {
    let mut m = BTreeMap::new();
    m.insert(
        "test_accuracy".into(),
        diagnostics::accuracy(model, &split.test)?,
    );
    m.insert(
        "train_eqopp".into(),
        diagnostics::eqopp(model, &split.train)?,
    );
    m.insert("test_eqopp".into(), diagnostics::eqopp(model, &split.test)?);
    Ok(m)
}

fn fairfl_split(
    cfg: &ExperimentConfig,
    data: Option<&TabularDataset>,
    seed: u64,
) -> Result<FederatedSplit, RunError> {
    let f = &cfg.fairfl;
    let generated;
    let ds = match data {
        Some(ds) => ds,
        None => {
            generated = synthetic_two_group(&f.synthetic, &mut RngStream::new(seed, DATA_STREAM))?;
            &generated
        }
    };
    Ok(prepare_federated(
        ds,
        cfg.run.num_clients,
        f.distribution,
        f.train_ratio,
        f.validation_per_group,
        f.lambda,
        &mut RngStream::new(seed, SPLIT_STREAM),
    )?)
}

/// Stage 1 over the group weights, then stage 2 with the learned weights.
fn two_stage(
    split: &FederatedSplit,
    bilevel: &RunConfig,
    fedavg: &RunConfig,
    floor: f64,
    clock: &dyn Fn() -> u64,
    sink: &mut dyn MetricsSink,
) -> Result<(Vector, RunResult), RunError> {
    let spec = &split.spec;
    let oracles = (0..spec.clients.len())
        .map(|m| FairFlOracle::new(spec, m))
        .collect::<Result<Vec<_>, _>>()?;
    let k = spec.num_groups;
    let constraint = SimplexConstraint {
        total: k as f64,
        floor,
    };
    let sim = Simulation::new(bilevel, &oracles)?
        .with_constraint(constraint)
        .with_clock(clock);
    let stage1 = sim.run(
        &Vector::filled(k, 1.0),
        &Vector::zeros(spec.num_features() + 1),
        sink,
    )?;
    let weights = constraint.project(&stage1.mean_x())?;
    let stage2 = weighted_fedavg(spec, &weights, fedavg, &mut diagnostics::NullSink)?;
    Ok((weights, stage2))
}

fn run_fairfl_seed(
    cfg: &ExperimentConfig,
    data: Option<&TabularDataset>,
    out_dir: &Path,
    seed: u64,
) -> Vec<Result<RunSummary, RunFailure>> {
    let distribution = cfg.fairfl.distribution.name();
    let mut methods: Vec<(String, RunConfig)> = method_configs(cfg, seed)
        .into_iter()
        .map(|(m, c)| (format!("two_stage_{m}"), c))
        .collect();
    if cfg.fairfl.baseline {
        methods.push((
            "fedavg".into(),
            RunConfig {
                seed,
                ..cfg.run.clone()
            },
        ));
    }
    let split = match fairfl_split(cfg, data, seed) {
        Ok(s) => s,
        Err(e) => {
            return methods
                .into_iter()
                .map(|(method, _)| {
                    Err(RunFailure {
                        method,
                        seed,
                        error: e.to_string(),
                    })
                })
                .collect()
        }
    };
    let mut out = Vec::new();
    for (method, run_cfg) in methods {
        let ctx = RunContext {
            experiment: cfg,
            out_dir,
            method,
            distribution,
            seed,
        };
        let fedavg_cfg = cfg.fairfl.fedavg_config(&run_cfg);
        let result = if ctx.method == "fedavg" {
            ctx.logged(&fedavg_cfg, |_, sink| {
                let ones = Vector::filled(split.spec.num_groups, 1.0);
                let run = weighted_fedavg(&split.spec, &ones, &fedavg_cfg, sink)?;
                fairness_metrics(&run.mean_x(), &split)
            })
        } else {
            ctx.logged(&run_cfg, |clock, sink| {
                let (weights, stage2) =
                    two_stage(&split, &run_cfg, &fedavg_cfg, cfg.fairfl.floor, clock, sink)?;
                let mut m = fairness_metrics(&stage2.mean_x(), &split)?;
                for (a, w) in weights.as_slice().iter().enumerate() {
                    m.insert(format!("weight_group{a}"), *w);
                }
                Ok(m)
            })
        };
        out.push(result.map_err(|e| RunFailure {
            method: ctx.method.clone(),
            seed,
            error: e.to_string(),
        }));
    }
    out
}

/// Runs every seed of the experiment and writes logs and the summary into `cfg.output_dir`.
///
/// Individual run failures are collected in the report; only setup and
/// summary IO errors abort the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, RunError> {
    let out_dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let data = match (&cfg.problem, &cfg.fairfl.data) {
        (ProblemKind::Fairfl, Some(path)) => Some(load_csv(path, &cfg.fairfl.schema)?.dataset),
        _ => None,
    };
    let one_seed = |seed: u64| match cfg.problem {
        ProblemKind::Quadratic => run_quadratic_seed(cfg, out_dir, seed),
        ProblemKind::Fairfl => run_fairfl_seed(cfg, data.as_ref(), out_dir, seed),
    };
    let per_seed: Vec<_> = if cfg.parallel_seeds {
        cfg.seeds.par_iter().map(|&s| one_seed(s)).collect()
    } else {
        cfg.seeds.iter().map(|&s| one_seed(s)).collect()
    };
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for outcome in per_seed.into_iter().flatten() {
        match outcome {
            Ok(r) => results.push(r),
            Err(f) => failures.push(f),
        }
    }
    let summary = SummaryTable::from_results(&results);
    emit_summary(&summary, &out_dir.join(SUMMARY_FILE))?;
    let failures_path = out_dir.join(FAILURES_FILE);
    if failures.is_empty() {
        if failures_path.exists() {
            std::fs::remove_file(&failures_path).map_err(io_err(&failures_path))?;
        }
    } else {
        write_failures(&failures, &failures_path)?;
    }
    Ok(ExperimentReport {
        summary,
        results,
        failures,
    })
}
