//! Tabular datasets with a binary label and a sensitive group attribute,
//! and the federated splits built from them.
//!
//! Every split is a partition: the multiset of rows across the outputs
//! equals the input. Rows carry a stable `row_id` so disjointness can be
//! checked after shuffling.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    /// `n × d` feature matrix.
    pub features: DenseMatrix,
    /// Binary labels, one per row.
    pub labels: Vec<u8>,
    /// Group ids in `0..num_groups`, one per row.
    pub groups: Vec<usize>,
    pub num_groups: usize,
    pub feature_names: Vec<String>,
    /// Stable row identifiers carried through every split.
    pub row_ids: Vec<u64>,
}

impl TabularDataset {
    /// Builds a dataset and checks the row-level invariants. Row ids default to `0..n`.
    pub fn new(
        features: DenseMatrix,
        labels: Vec<u8>,
        groups: Vec<usize>,
        num_groups: usize,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = features.rows();
        let ds = TabularDataset {
            features,
            labels,
            groups,
            num_groups,
            feature_names,
            row_ids: (0..n as u64).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Row-level consistency: equal lengths, binary labels, group ids in range, finite features.
    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        for len in [self.labels.len(), self.groups.len(), self.row_ids.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        if self.feature_names.len() != self.features.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.features.cols(),
                found: self.feature_names.len(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::config(
                "labels",
                alloc::format!("label {bad} is not binary"),
            ));
        }
        if let Some(&g) = self.groups.iter().find(|&&g| g >= self.num_groups) {
            return Err(Error::config(
                "groups",
                alloc::format!("group id {g} outside 0..{}", self.num_groups),
            ));
        }
        for i in 0..n {
            for j in 0..self.features.cols() {
                if !self.features[(i, j)].is_finite() {
                    return Err(Error::NonFinite("features"));
                }
            }
        }
        Ok(())
    }

    /// Errors unless every group id in `0..num_groups` has at least one row.
    pub fn require_all_groups(&self) -> Result<()> {
        let counts = self.group_counts();
        match counts.iter().position(|&c| c == 0) {
            Some(group) => Err(Error::EmptyGroup { group }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups];
        for &g in &self.groups {
            counts[g] += 1;
        }
        counts
    }

    /// Row positions belonging to `group`, in dataset order.
    pub fn group_rows(&self, group: usize) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(i, _)| i)
            .collect()
    }

    /// The rows at `positions`, in that order.
    pub fn subset(&self, positions: &[usize]) -> TabularDataset {
        let d = self.features.cols();
        let mut features = DenseMatrix::zeros(positions.len(), d);
        for (r, &i) in positions.iter().enumerate() {
            for j in 0..d {
                features[(r, j)] = self.features[(i, j)];
            }
        }
        TabularDataset {
            features,
            labels: positions.iter().map(|&i| self.labels[i]).collect(),
            groups: positions.iter().map(|&i| self.groups[i]).collect(),
            num_groups: self.num_groups,
            feature_names: self.feature_names.clone(),
            row_ids: positions.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }

    /// Row-wise concatenation of datasets sharing a schema.
    pub fn concat(parts: &[TabularDataset]) -> Result<TabularDataset> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let d = first.num_features();
        let n: usize = parts.iter().map(|p| p.len()).sum();
        let mut features = DenseMatrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(n);
        let mut row_ids = Vec::with_capacity(n);
        let mut r = 0;
        for p in parts {
            if p.num_features() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: p.num_features(),
                });
            }
            for i in 0..p.len() {
                for j in 0..d {
                    features[(r, j)] = p.features[(i, j)];
                }
                r += 1;
            }
            labels.extend_from_slice(&p.labels);
            groups.extend_from_slice(&p.groups);
            row_ids.extend_from_slice(&p.row_ids);
        }
        Ok(TabularDataset {
            features,
            labels,
            groups,
            num_groups: first.num_groups,
            feature_names: first.feature_names.clone(),
            row_ids,
        })
    }
}

/// Stratified train/test split: each group is shuffled and split at
/// `round(ratio · n_group)`.
pub fn split_train_test(
    ds: &TabularDataset,
    ratio: f64,
    rng: &mut RngStream,
) -> Result<(TabularDataset, TabularDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("ratio", "must lie in (0, 1)"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for group in 0..ds.num_groups {
        let mut rows = ds.group_rows(group);
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            return Err(Error::InsufficientGroup {
                group,
                required: 2,
                available: rows.len(),
            });
        }
        rng.shuffle(&mut rows);
        let n_train = libm::round(ratio * rows.len() as f64) as usize;
        let n_train = n_train.clamp(1, rows.len() - 1);
        train.extend_from_slice(&rows[..n_train]);
        test.extend_from_slice(&rows[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Uniformly random partition into `clients` shards whose sizes differ by at most one.
pub fn partition_iid(
    ds: &TabularDataset,
    clients: usize,
    rng: &mut RngStream,
) -> Result<Vec<TabularDataset>> {
    if clients == 0 {
        return Err(Error::config("clients", "must be at least 1"));
    }
    let mut rows: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut rows);
    let base = rows.len() / clients;
    let extra = rows.len() % clients;
    let mut out = Vec::with_capacity(clients);
    let mut start = 0;
    for m in 0..clients {
        let size = base + usize::from(m < extra);
        let mut shard = rows[start..start + size].to_vec();
        shard.sort_unstable();
        out.push(ds.subset(&shard));
        start += size;
    }
    Ok(out)
}

/// Three-client non-I.I.D. partition: each group's rows are shuffled and cut
/// into shares of `floor(0.2 n)`, `floor(0.2 n)` and the remainder, and the
/// shares go to the clients in a fresh random order per group.
pub fn partition_noniid(
    ds: &TabularDataset,
    clients: usize,
    rng: &mut RngStream,
) -> Result<Vec<TabularDataset>> {
    if clients != 3 {
        return Err(Error::config(
            "clients",
            alloc::format!("the 2:2:6 scheme needs exactly 3 clients, got {clients}"),
        ));
    }
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); 3];
    for group in 0..ds.num_groups {
        let mut rows = ds.group_rows(group);
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 3 {
            return Err(Error::InsufficientGroup {
                group,
                required: 3,
                available: rows.len(),
            });
        }
        rng.shuffle(&mut rows);
        let small = rows.len() / 5;
        let cuts = [0, small, 2 * small, rows.len()];
        let mut order = [0usize, 1, 2];
        rng.shuffle(&mut order);
        for (share, &client) in order.iter().enumerate() {
            assigned[client].extend_from_slice(&rows[cuts[share]..cuts[share + 1]]);
        }
    }
    Ok(assigned
        .into_iter()
        .map(|mut rows| {
            rows.sort_unstable();
            ds.subset(&rows)
        })
        .collect())
}

/// Draws exactly `per_group` rows of every group, without replacement, into a
/// validation set and returns `(validation, remaining_train)`.
pub fn build_balanced_validation(
    client_train: &TabularDataset,
    per_group: usize,
    rng: &mut RngStream,
) -> Result<(TabularDataset, TabularDataset)> {
    let mut validation = Vec::new();
    let mut taken = vec![false; client_train.len()];
    if per_group > 0 {
        for group in 0..client_train.num_groups {
            let mut rows = client_train.group_rows(group);
            if rows.len() < per_group {
                return Err(Error::InsufficientGroup {
                    group,
                    required: per_group,
                    available: rows.len(),
                });
            }
            rng.shuffle(&mut rows);
            for &i in &rows[..per_group] {
                taken[i] = true;
                validation.push(i);
            }
        }
    }
    validation.sort_unstable();
    let remaining: Vec<usize> = (0..client_train.len()).filter(|&i| !taken[i]).collect();
    Ok((
        client_train.subset(&validation),
        client_train.subset(&remaining),
    ))
}
