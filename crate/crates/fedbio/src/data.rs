//! CSV ingestion for tabular fairness datasets.
//!
//! Numeric columns are z-scored, categorical columns one-hot encoded, and the
//! label and group columns mapped to integer codes. The fitted [`Encoder`]
//! records every mapping and can be reapplied to another file with the same
//! columns; categories it has not seen are rejected.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use fedbio_core::dataset::TabularDataset;
use fedbio_core::numerics::DenseMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NotNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: empty cell")]
    EmptyCell { row: usize, column: String },
    #[error(
        "row {row}, column `{column}`: category `{value}` was not seen when the encoder was fitted"
    )]
    UnseenCategory {
        row: usize,
        column: String,
        value: String,
    },
    #[error("label column `{column}` has {found} distinct values; a binary label is required")]
    NotBinary { column: String, found: usize },
    #[error("no data rows")]
    NoRows,
    #[error(transparent)]
    Dataset(#[from] fedbio_core::Error),
}

/// Which columns play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub label_column: String,
    pub group_column: String,
    /// Label value mapped to 1; by default the larger of the two values.
    pub positive_label: Option<String>,
    /// Columns to one-hot encode even when their values parse as numbers.
    pub categorical: Vec<String>,
    /// Columns to ignore.
    pub drop: Vec<String>,
    /// z-score numeric columns (on by default).
    pub standardize: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: "label".into(),
            group_column: "group".into(),
            positive_label: None,
            categorical: Vec::new(),
            drop: Vec::new(),
            standardize: true,
        }
    }
}

/// How one input column becomes feature columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnEncoding {
    Numeric {
        name: String,
        mean: f64,
        std: f64,
    },
    Categorical {
        name: String,
        categories: Vec<String>,
    },
}

impl ColumnEncoding {
    fn name(&self) -> &str {
        match self {
            ColumnEncoding::Numeric { name, .. } | ColumnEncoding::Categorical { name, .. } => name,
        }
    }

    fn width(&self) -> usize {
        match self {
            ColumnEncoding::Numeric { .. } => 1,
            ColumnEncoding::Categorical { categories, .. } => categories.len(),
        }
    }

    fn feature_names(&self) -> Vec<String> {
        match self {
            ColumnEncoding::Numeric { name, .. } => vec![name.clone()],
            ColumnEncoding::Categorical { name, categories } => {
                categories.iter().map(|c| format!("{name}={c}")).collect()
            }
        }
    }
}

/// Fitted column mappings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub label_column: String,
    pub group_column: String,
    /// `labels[code]` is the raw label value with that code.
    pub labels: Vec<String>,
    /// `groups[code]` is the raw group value with that code.
    pub groups: Vec<String>,
    pub columns: Vec<ColumnEncoding>,
}

struct RawTable {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let headers = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    let rows = reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(String::from).collect())
                .map_err(csv_err)
        })
        .collect::<Result<Vec<Vec<String>>, _>>()?;
    Ok(RawTable { headers, rows })
}

impl RawTable {
    fn column(&self, name: &str) -> Result<usize, DataError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    fn cell(&self, row: usize, col: usize) -> Result<&str, DataError> {
        let v = self.rows[row][col].as_str();
        if v.is_empty() {
            return Err(DataError::EmptyCell {
                row: row + 1,
                column: self.headers[col].clone(),
            });
        }
        Ok(v)
    }
}

/// Sorted distinct values, numerically when every value is a number.
fn sorted_values(values: impl Iterator<Item = String>) -> Vec<String> {
    let set: BTreeSet<String> = values.collect();
    let mut v: Vec<String> = set.into_iter().collect();
    if v.iter().all(|s| s.parse::<f64>().is_ok()) {
        v.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .total_cmp(&b.parse::<f64>().unwrap())
        });
    }
    v
}

fn parse_number(table: &RawTable, row: usize, col: usize) -> Result<f64, DataError> {
    let v = table.cell(row, col)?;
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(DataError::NotNumeric {
            row: row + 1,
            column: table.headers[col].clone(),
            value: v.to_string(),
        }),
    }
}

impl Encoder {
    fn fit(table: &RawTable, schema: &CsvSchema) -> Result<Encoder, DataError> {
        if table.rows.is_empty() {
            return Err(DataError::NoRows);
        }
        let label_col = table.column(&schema.label_column)?;
        let group_col = table.column(&schema.group_column)?;
        for name in schema.categorical.iter().chain(&schema.drop) {
            table.column(name)?;
        }
        let n = table.rows.len();
        let collect = |col: usize| -> Result<Vec<String>, DataError> {
            (0..n)
                .map(|r| table.cell(r, col).map(String::from))
                .collect()
        };
        let mut labels = sorted_values(collect(label_col)?.into_iter());
        if labels.len() > 2 || labels.is_empty() {
            return Err(DataError::NotBinary {
                column: schema.label_column.clone(),
                found: labels.len(),
            });
        }
        if let Some(pos) = &schema.positive_label {
            if !labels.contains(pos) {
                return Err(DataError::UnseenCategory {
                    row: 0,
                    column: schema.label_column.clone(),
                    value: pos.clone(),
                });
            }
            labels.retain(|l| l != pos);
            labels.push(pos.clone());
        }
        if labels.len() == 1 {
            // Keep the code of a lone label value stable; "" never matches a cell.
            let v = labels[0].clone();
            let positive =
                schema.positive_label.as_deref() == Some(&v) || v.parse::<f64>() == Ok(1.0);
            labels = if positive {
                vec![String::new(), v]
            } else {
                vec![v, String::new()]
            };
        }
        let groups = sorted_values(collect(group_col)?.into_iter());

        let mut columns = Vec::new();
        for (col, name) in table.headers.iter().enumerate() {
            if col == label_col || col == group_col || schema.drop.contains(name) {
                continue;
            }
            let first = table.cell(0, col)?;
            let numeric = !schema.categorical.contains(name) && first.parse::<f64>().is_ok();
            if numeric {
                let values = (0..n)
                    .map(|r| parse_number(table, r, col))
                    .collect::<Result<Vec<_>, _>>()?;
                let (mean, std) = if schema.standardize {
                    let mean = values.iter().sum::<f64>() / n as f64;
                    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let std = var.sqrt();
                    (mean, if std > 0.0 { std } else { 1.0 })
                } else {
                    (0.0, 1.0)
                };
                columns.push(ColumnEncoding::Numeric {
                    name: name.clone(),
                    mean,
                    std,
                });
            } else {
                columns.push(ColumnEncoding::Categorical {
                    name: name.clone(),
                    categories: sorted_values(collect(col)?.into_iter()),
                });
            }
        }
        Ok(Encoder {
            label_column: schema.label_column.clone(),
            group_column: schema.group_column.clone(),
            labels,
            groups,
            columns,
        })
    }

    fn transform(&self, table: &RawTable) -> Result<TabularDataset, DataError> {
        if table.rows.is_empty() {
            return Err(DataError::NoRows);
        }
        let label_col = table.column(&self.label_column)?;
        let group_col = table.column(&self.group_column)?;
        let positions = self
            .columns
            .iter()
            .map(|c| table.column(c.name()))
            .collect::<Result<Vec<_>, _>>()?;
        let width: usize = self.columns.iter().map(ColumnEncoding::width).sum();
        let n = table.rows.len();
        let mut features = DenseMatrix::zeros(n, width);
        let mut labels = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(n);
        let code = |values: &[String], row: usize, col: usize| -> Result<usize, DataError> {
            let v = table.cell(row, col)?;
            values
                .iter()
                .position(|x| x == v)
                .ok_or_else(|| DataError::UnseenCategory {
                    row: row + 1,
                    column: table.headers[col].clone(),
                    value: v.to_string(),
                })
        };
        for r in 0..n {
            labels.push(code(&self.labels, r, label_col)? as u8);
            groups.push(code(&self.groups, r, group_col)?);
            let mut offset = 0;
            for (enc, &col) in self.columns.iter().zip(&positions) {
                match enc {
                    ColumnEncoding::Numeric { mean, std, .. } => {
                        features[(r, offset)] = (parse_number(table, r, col)? - mean) / std;
                    }
                    ColumnEncoding::Categorical { categories, .. } => {
                        features[(r, offset + code(categories, r, col)?)] = 1.0;
                    }
                }
                offset += enc.width();
            }
        }
        let names = self
            .columns
            .iter()
            .flat_map(ColumnEncoding::feature_names)
            .collect();
        Ok(TabularDataset::new(
            features,
            labels,
            groups,
            self.groups.len(),
            names,
        )?)
    }
}

/// A dataset together with the encoder that produced it.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: TabularDataset,
    pub encoder: Encoder,
}

/// Fits an encoder on `path` and encodes the file.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LoadedDataset, DataError> {
    let table = read_table(path)?;
    let encoder = Encoder::fit(&table, schema)?;
    let dataset = encoder.transform(&table)?;
    Ok(LoadedDataset { dataset, encoder })
}

/// Encodes `path` with an already fitted encoder.
pub fn load_csv_with(path: &Path, encoder: &Encoder) -> Result<TabularDataset, DataError> {
    encoder.transform(&read_table(path)?)
}

/// Writes feature columns (by feature name), then `label` and `group` codes.
///
/// Reading the file back with `standardize = false` reproduces the dataset.
pub fn write_csv(ds: &TabularDataset, path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut header: Vec<String> = ds.feature_names.clone();
    header.push("label".into());
    header.push("group".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.labels[i].to_string());
        rec.push(ds.groups[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io_err)
}
