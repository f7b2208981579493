//! Run logs.
//!
//! The primary log is newline-delimited JSON: the first line is
//! `{"metadata": {...}}` and every following line is one metrics record.
//! [`write_csv_log`] exports the same records as a flat CSV with the columns
//! in [`CSV_COLUMNS`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fedbio_core::diagnostics::{MetricsRecord, MetricsSink, EQOPP_DEFINITION, RECORD_CONVENTION};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CSV_COLUMNS: [&str; 7] = [
    "t",
    "grad_norm_sq",
    "consensus_error",
    "inner_error",
    "hypergrad_bias",
    "alpha_t",
    "outer_loss",
];

pub const LOG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: the first line must be a metadata object")]
    MissingMetadata { path: PathBuf },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Conventions a reader needs to interpret a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub eqopp: String,
    pub record_timing: String,
    pub grad_norm: String,
    pub communication: String,
    pub first_step: String,
    pub outer_constraint: String,
    pub std: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            eqopp: EQOPP_DEFINITION.into(),
            record_timing: RECORD_CONVENTION.into(),
            grad_norm: "exact ||grad h(mean x)||^2 when a closed form exists (grad_norm_is_estimate = false), \
                        otherwise ||mean client outer direction||^2 (grad_norm_is_estimate = true)"
                .into(),
            communication: "all clients every round; x is averaged for every algorithm; fedbioacc also averages \
                            the outer momentum and the stored previous iterate; y is never averaged"
                .into(),
            first_step: "fedbioacc uses plain estimates at t = 1".into(),
            outer_constraint: "fairfl group weights are projected onto {w_a >= floor, sum w = K} after every outer update"
                .into(),
            std: "sample standard deviation over seeds (n - 1 denominator, 0 for one seed)".into(),
        }
    }
}

/// First line of every log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMetadata {
    pub format_version: u32,
    /// `fedbio <crate version>`.
    pub version: String,
    pub run_name: String,
    pub seed: u64,
    /// The run configuration exactly as executed.
    pub run_config: Value,
    /// The experiment configuration this run came from.
    pub experiment: Value,
    pub conventions: Conventions,
}

impl LogMetadata {
    pub fn new(
        run_name: impl Into<String>,
        seed: u64,
        run_config: Value,
        experiment: Value,
    ) -> Self {
        LogMetadata {
            format_version: LOG_FORMAT_VERSION,
            version: version_string(),
            run_name: run_name.into(),
            seed,
            run_config,
            experiment,
            conventions: Conventions::default(),
        }
    }
}

pub fn version_string() -> String {
    format!("fedbio {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Serialize, Deserialize)]
struct MetadataLine<M> {
    metadata: M,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn record_line(record: &MetricsRecord) -> String {
    serde_json::to_string(record).expect("metrics records always serialize")
}

/// Writes a complete log in one go.
pub fn write_log(
    records: &[MetricsRecord],
    metadata: &LogMetadata,
    path: &Path,
) -> Result<(), LogError> {
    let mut sink = NdjsonSink::create(path, metadata)?;
    for r in records {
        sink.record(r);
    }
    sink.finish()
}

/// Reads a log back into its metadata and records.
pub fn read_log(path: &Path) -> Result<(LogMetadata, Vec<MetricsRecord>), LogError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| LogError::MissingMetadata {
            path: path.to_path_buf(),
        })?
        .map_err(io_err(path))?;
    let meta: MetadataLine<LogMetadata> =
        serde_json::from_str(&first).map_err(|source| LogError::Json {
            path: path.to_path_buf(),
            line: 1,
            source,
        })?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|source| LogError::Json {
                path: path.to_path_buf(),
                line: i + 2,
                source,
            })?,
        );
    }
    Ok((meta.metadata, records))
}

/// Log text with every `wall_clock_ns` set to 0, for determinism comparisons.
pub fn masked_log_text(path: &Path) -> Result<String, LogError> {
    let (meta, mut records) = read_log(path)?;
    for r in &mut records {
        r.wall_clock_ns = 0;
    }
    let mut out =
        serde_json::to_string(&MetadataLine { metadata: &meta }).expect("metadata serializes");
    out.push('\n');
    for r in &records {
        out.push_str(&record_line(r));
        out.push('\n');
    }
    Ok(out)
}

/// Streams records to an NDJSON file as the engine produces them.
///
/// The sink interface cannot fail, so the first write error is kept and
/// returned by [`NdjsonSink::finish`].
pub struct NdjsonSink {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl NdjsonSink {
    pub fn create(path: &Path, metadata: &LogMetadata) -> Result<Self, LogError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        let head = serde_json::to_string(&MetadataLine { metadata }).expect("metadata serializes");
        writeln!(out, "{head}").map_err(io_err(path))?;
        Ok(NdjsonSink {
            path: path.to_path_buf(),
            out,
            error: None,
        })
    }

    pub fn finish(mut self) -> Result<(), LogError> {
        if let Some(e) = self.error.take() {
            return Err(LogError::Io {
                path: self.path,
                source: e,
            });
        }
        self.out.flush().map_err(io_err(&self.path))
    }
}

impl MetricsSink for NdjsonSink {
    fn record(&mut self, record: &MetricsRecord) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{}", record_line(record)) {
                self.error = Some(e);
            }
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Flat CSV export; absent optional fields are empty cells.
pub fn write_csv_log(records: &[MetricsRecord], path: &Path) -> Result<(), LogError> {
    let csv_err = |source| LogError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(File::create(path).map_err(io_err(path))?);
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.t.to_string(),
            format!("{:?}", r.grad_norm_sq),
            format!("{:?}", r.consensus_error),
            opt(r.inner_error),
            opt(r.hypergrad_bias),
            opt(r.alpha_t),
            format!("{:?}", r.outer_loss),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}
