//! Experiment configuration files.
//!
//! Configs are TOML. Every key is checked against the known schema before
//! deserialization, so a misspelled key is an error that names the closest
//! valid key instead of being silently ignored. Omitted keys take their
//! defaults (interval 5, steps 0.1, `δ = 0.1`, `u = 1`, `c_ν = c_ω = 1`,
//! 2000 steps, batch size 128).
//!
//! ```toml
//! problem = "quadratic"
//! seeds = [0, 1, 2]
//! output_dir = "runs/quadratic"
//!
//! [run]
//! algorithm = "fedbio"
//! num_clients = 4
//! total_steps = 500
//!
//! [quadratic]
//! zeta_scale = 0.5
//! ```

use std::path::{Path, PathBuf};

use fedbio_core::engine::{Algorithm, RunConfig};
use fedbio_core::problems::fairfl::{Distribution, SyntheticFairSpec, TwoStageConfig};
use fedbio_core::problems::QuadraticFamilySpec;
use serde::{Deserialize, Serialize};

use crate::data::CsvSchema;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FEDBIO_OUTPUT_DIR";

/// Standard outer learning-rate sweep; use as `eta_grid`.
pub const LEARNING_RATE_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}{}: unknown key `{key}`{}", line.map(|l| format!(", line {l}")).unwrap_or_default(), suggestion.as_ref().map(|s| format!("; did you mean `{s}`?")).unwrap_or_default())]
    UnknownKey {
        path: PathBuf,
        key: String,
        line: Option<usize>,
        suggestion: Option<String>,
    },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for syntax and unknown-key errors, false for constraint violations.
    pub fn is_parse_error(&self) -> bool {
        matches!(
            self,
            ConfigError::Io { .. } | ConfigError::Parse { .. } | ConfigError::UnknownKey { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Quadratic,
    Fairfl,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Quadratic => "quadratic",
            ProblemKind::Fairfl => "fairfl",
        }
    }
}

/// Quadratic problem settings; the client count comes from `run.num_clients`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadraticSection {
    pub dim_x: usize,
    pub dim_y: usize,
    pub mu: f64,
    pub lipschitz: f64,
    pub zeta_scale: f64,
    pub noise_sigma: f64,
    pub noise_samples: usize,
    pub outer_x_weight: f64,
    /// Seed of the generated problem; by default each run uses its own seed.
    pub problem_seed: Option<u64>,
}

impl Default for QuadraticSection {
    fn default() -> Self {
        let d = QuadraticFamilySpec::default();
        QuadraticSection {
            dim_x: d.dim_x,
            dim_y: d.dim_y,
            mu: d.mu,
            lipschitz: d.lipschitz,
            zeta_scale: d.zeta_scale,
            noise_sigma: d.noise_sigma,
            noise_samples: d.noise_samples,
            outer_x_weight: d.outer_x_weight,
            problem_seed: None,
        }
    }
}

impl QuadraticSection {
    pub fn family_spec(&self, clients: usize, seed: u64) -> QuadraticFamilySpec {
        QuadraticFamilySpec {
            dim_x: self.dim_x,
            dim_y: self.dim_y,
            clients,
            mu: self.mu,
            lipschitz: self.lipschitz,
            zeta_scale: self.zeta_scale,
            noise_sigma: self.noise_sigma,
            noise_samples: self.noise_samples,
            outer_x_weight: self.outer_x_weight,
            seed: self.problem_seed.unwrap_or(seed),
        }
    }
}

/// Stage-2 FedAvg settings of the fairness task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedAvgSection {
    pub total_steps: usize,
    pub eta_outer: f64,
    pub batch_size: usize,
    pub sync_interval: usize,
}

impl Default for FedAvgSection {
    fn default() -> Self {
        FedAvgSection {
            total_steps: 2000,
            eta_outer: 0.1,
            batch_size: 128,
            sync_interval: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FairFlSection {
    /// CSV file, relative to the config file. Without one a synthetic task is generated.
    pub data: Option<PathBuf>,
    pub schema: CsvSchema,
    pub synthetic: SyntheticFairSpec,
    pub distribution: Distribution,
    pub train_ratio: f64,
    pub validation_per_group: usize,
    pub lambda: f64,
    pub floor: f64,
    /// Also train the unweighted FedAvg baseline.
    pub baseline: bool,
    pub fedavg: FedAvgSection,
}

impl Default for FairFlSection {
    fn default() -> Self {
        FairFlSection {
            data: None,
            schema: CsvSchema::default(),
            synthetic: SyntheticFairSpec::default(),
            distribution: Distribution::Iid,
            train_ratio: 0.7,
            validation_per_group: 20,
            lambda: fedbio_core::problems::FairFlSpec::DEFAULT_LAMBDA,
            floor: TwoStageConfig::DEFAULT_FLOOR,
            baseline: true,
            fedavg: FedAvgSection::default(),
        }
    }
}

impl FairFlSection {
    /// Stage-2 run configuration derived from the stage-1 one.
    pub fn fedavg_config(&self, bilevel: &RunConfig) -> RunConfig {
        let mut cfg = bilevel.clone();
        cfg.algorithm = Algorithm::FedAvg;
        cfg.total_steps = self.fedavg.total_steps;
        cfg.eta_outer = self.fedavg.eta_outer;
        cfg.eta_schedule = None;
        cfg.sync_interval = self.fedavg.sync_interval;
        cfg.neumann.batch_f = self.fedavg.batch_size;
        cfg.bias_mc_samples = 0;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    /// One run per seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Run seeds concurrently.
    pub parallel_seeds: bool,
    /// Optional sweep over `run.eta_outer`; each value is reported as its own method.
    pub eta_grid: Option<Vec<f64>>,
    pub run: RunConfig,
    pub quadratic: QuadraticSection,
    pub fairfl: FairFlSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: ProblemKind::Quadratic,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            parallel_seeds: false,
            eta_grid: None,
            run: RunConfig::default(),
            quadratic: QuadraticSection::default(),
            fairfl: FairFlSection::default(),
        }
    }
}

enum Keys {
    Leaf,
    Table(&'static [(&'static str, Keys)]),
}

use Keys::{Leaf, Table};

const NEUMANN_KEYS: &[(&str, Keys)] = &[
    ("eta", Leaf),
    ("q_terms", Leaf),
    ("batch_f", Leaf),
    ("batch_g", Leaf),
    ("batch_hess", Leaf),
];

const RUN_KEYS: &[(&str, Keys)] = &[
    ("algorithm", Leaf),
    ("num_clients", Leaf),
    ("sync_interval", Leaf),
    ("total_steps", Leaf),
    ("gamma", Leaf),
    ("eta_outer", Leaf),
    ("eta_schedule", Leaf),
    ("c_nu", Leaf),
    ("c_omega", Leaf),
    ("delta", Leaf),
    ("u", Leaf),
    ("sigma", Leaf),
    ("neumann", Table(NEUMANN_KEYS)),
    ("solve", Table(&[("tol", Leaf), ("max_iter", Leaf)])),
    ("estimator", Leaf),
    ("batch_y", Leaf),
    ("seed", Leaf),
    ("log_every", Leaf),
    ("parallel", Leaf),
    ("bias_mc_samples", Leaf),
];

const QUADRATIC_KEYS: &[(&str, Keys)] = &[
    ("dim_x", Leaf),
    ("dim_y", Leaf),
    ("mu", Leaf),
    ("lipschitz", Leaf),
    ("zeta_scale", Leaf),
    ("noise_sigma", Leaf),
    ("noise_samples", Leaf),
    ("outer_x_weight", Leaf),
    ("problem_seed", Leaf),
];

const FAIRFL_KEYS: &[(&str, Keys)] = &[
    ("data", Leaf),
    (
        "schema",
        Table(&[
            ("label_column", Leaf),
            ("group_column", Leaf),
            ("positive_label", Leaf),
            ("categorical", Leaf),
            ("drop", Leaf),
            ("standardize", Leaf),
        ]),
    ),
    (
        "synthetic",
        Table(&[
            ("majority", Leaf),
            ("minority", Leaf),
            ("label_noise", Leaf),
        ]),
    ),
    ("distribution", Leaf),
    ("train_ratio", Leaf),
    ("validation_per_group", Leaf),
    ("lambda", Leaf),
    ("floor", Leaf),
    ("baseline", Leaf),
    (
        "fedavg",
        Table(&[
            ("total_steps", Leaf),
            ("eta_outer", Leaf),
            ("batch_size", Leaf),
            ("sync_interval", Leaf),
        ]),
    ),
];

const TOP_KEYS: &[(&str, Keys)] = &[
    ("problem", Leaf),
    ("seeds", Leaf),
    ("output_dir", Leaf),
    ("parallel_seeds", Leaf),
    ("eta_grid", Leaf),
    ("run", Table(RUN_KEYS)),
    ("quadratic", Table(QUADRATIC_KEYS)),
    ("fairfl", Table(FAIRFL_KEYS)),
];

/// Closest known key by Jaro-Winkler similarity, if reasonably close.
fn nearest_key<'a>(key: &str, known: impl Iterator<Item = &'a str>) -> Option<String> {
    known
        .map(|k| (strsim::jaro_winkler(key, k), k))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .filter(|(score, _)| *score >= 0.6)
        .map(|(_, k)| k.to_string())
}

/// Searches the whole schema when the key is not close to anything in its own table.
fn all_keys(keys: &'static [(&'static str, Keys)], prefix: &str, out: &mut Vec<String>) {
    for (k, sub) in keys {
        let full = if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        };
        if let Table(inner) = sub {
            all_keys(inner, &full, out);
        }
        out.push(full);
    }
}

fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            t.strip_prefix(key)
                .or_else(|| t.strip_prefix(&format!("\"{key}\"")))
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn check_keys(
    table: &toml::Table,
    keys: &'static [(&'static str, Keys)],
    prefix: &str,
    text: &str,
    path: &Path,
) -> Result<(), ConfigError> {
    for (k, v) in table {
        let full = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match keys.iter().find(|(name, _)| name == k) {
            Some((_, Table(inner))) => {
                if let toml::Value::Table(t) = v {
                    check_keys(t, inner, &full, text, path)?;
                }
            }
            Some((_, Leaf)) => {}
            None => {
                let local = nearest_key(k, keys.iter().map(|(n, _)| *n)).map(|s| {
                    if prefix.is_empty() {
                        s
                    } else {
                        format!("{prefix}.{s}")
                    }
                });
                let suggestion = local.or_else(|| {
                    let mut every = Vec::new();
                    all_keys(TOP_KEYS, "", &mut every);
                    nearest_key(k, every.iter().map(|s| s.rsplit('.').next().unwrap())).and_then(
                        |leaf| {
                            every
                                .into_iter()
                                .find(|f| f.rsplit('.').next() == Some(leaf.as_str()))
                        },
                    )
                });
                return Err(ConfigError::UnknownKey {
                    path: path.to_path_buf(),
                    key: full,
                    line: line_of_key(text, k),
                    suggestion,
                });
            }
        }
    }
    Ok(())
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_error(text: &str, path: &Path, err: toml::de::Error) -> ConfigError {
    ConfigError::Parse {
        path: path.to_path_buf(),
        line: err.span().map_or(1, |s| line_at(text, s.start)),
        message: err.message().to_string(),
    }
}

/// Parses and validates config text; relative paths resolve against `base_dir`.
pub fn parse_config_str(
    text: &str,
    path: &Path,
    base_dir: &Path,
) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, path, e))?;
    check_keys(&table, TOP_KEYS, "", text, path)?;
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| parse_error(text, path, e))?;
    if let Some(data) = &cfg.fairfl.data {
        if data.is_relative() {
            cfg.fairfl.data = Some(base_dir.join(data));
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, path, base)
}

/// Replaces `output_dir` when [`OUTPUT_DIR_ENV`] is set and nonempty.
pub fn apply_env_overrides(cfg: &mut ExperimentConfig) {
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
        cfg.output_dir = PathBuf::from(dir);
    }
}

fn core_error(prefix: &str, e: fedbio_core::Error) -> ConfigError {
    match e {
        fedbio_core::Error::InvalidConfig { field, reason } => {
            ConfigError::invalid(format!("{prefix}.{field}"), reason)
        }
        other => ConfigError::invalid(prefix, other.to_string()),
    }
}

/// Checks every constraint that does not need the data itself.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    if cfg.seeds.is_empty() {
        return Err(ConfigError::invalid(
            "seeds",
            "at least one seed is required",
        ));
    }
    let mut sorted = cfg.seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != cfg.seeds.len() {
        return Err(ConfigError::invalid("seeds", "seeds must be distinct"));
    }
    if let Some(grid) = &cfg.eta_grid {
        if grid.is_empty() || grid.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(ConfigError::invalid(
                "eta_grid",
                "needs positive finite values",
            ));
        }
    }
    cfg.run.validate().map_err(|e| core_error("run", e))?;
    match cfg.problem {
        ProblemKind::Quadratic => {
            let q = &cfg.quadratic;
            if !(q.mu > 0.0) || !(q.lipschitz >= q.mu) {
                return Err(ConfigError::invalid(
                    "quadratic.mu",
                    "need 0 < mu <= lipschitz",
                ));
            }
            if q.dim_x == 0 || q.dim_y == 0 {
                return Err(ConfigError::invalid(
                    "quadratic.dim_x",
                    "dimensions must be positive",
                ));
            }
            if q.dim_y < q.dim_x && q.outer_x_weight <= 0.0 {
                return Err(ConfigError::invalid(
                    "quadratic.dim_y",
                    "dim_y < dim_x needs outer_x_weight > 0 for a unique minimizer",
                ));
            }
            if q.noise_sigma < 0.0 || q.zeta_scale < 0.0 {
                return Err(ConfigError::invalid(
                    "quadratic.noise_sigma",
                    "must be nonnegative",
                ));
            }
        }
        ProblemKind::Fairfl => {
            let f = &cfg.fairfl;
            if cfg.run.algorithm == Algorithm::FedAvg {
                return Err(ConfigError::invalid(
                    "run.algorithm",
                    "the fairness task learns group weights with fedbio or fedbioacc; the fedavg baseline runs automatically",
                ));
            }
            if let Some(data) = &f.data {
                if !data.is_file() {
                    return Err(ConfigError::invalid(
                        "fairfl.data",
                        format!("{} does not exist", data.display()),
                    ));
                }
            }
            if !(f.train_ratio > 0.0 && f.train_ratio < 1.0) {
                return Err(ConfigError::invalid(
                    "fairfl.train_ratio",
                    "must lie in (0, 1)",
                ));
            }
            if f.validation_per_group == 0 {
                return Err(ConfigError::invalid(
                    "fairfl.validation_per_group",
                    "must be at least 1",
                ));
            }
            if !(f.lambda > 0.0) {
                return Err(ConfigError::invalid("fairfl.lambda", "must be positive"));
            }
            if !(f.floor >= 0.0) {
                return Err(ConfigError::invalid("fairfl.floor", "must be nonnegative"));
            }
            if f.distribution == Distribution::NonIid && cfg.run.num_clients != 3 {
                return Err(ConfigError::invalid(
                    "run.num_clients",
                    "the non-i.i.d. split is defined for exactly 3 clients",
                ));
            }
            if f.fedavg.sync_interval == 0 {
                return Err(ConfigError::invalid(
                    "fairfl.fedavg.sync_interval",
                    "must be at least 1",
                ));
            }
            f.fedavg_config(&cfg.run)
                .validate()
                .map_err(|e| core_error("fairfl.fedavg", e))?;
        }
    }
    Ok(())
}
