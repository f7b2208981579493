//! Group-weight learning for fair federated logistic regression.
//!
//! Each client holds a training set and a small group-balanced validation
//! set. The outer variable is the vector of group weights `ω ∈ R^K`, the
//! inner variable the logistic model `θ ∈ R^{d+1}` (intercept last):
//!
//! ```text
//! g(ω, θ) = (1/n_t) Σ_i ω_{a_i} ℓ(θ; x_i, y_i) + (λ/2) ‖θ‖²
//! f(ω, θ) = (1/n_v) Σ_i ℓ(θ; x_i, y_i)            (validation rows)
//! ```
//!
//! Because the validation set is balanced, a low outer loss requires the
//! model to fit every group, which pushes weight toward groups the
//! unweighted objective neglects. The regularizer makes `g(ω, ·)`
//! `λ`-strongly convex whenever `ω >= 0`.
//!
//! [`two_stage_train`] learns `ω*` with FedBiO or FedBiOAcc (projecting onto
//! `{ω_a >= floor, Σ ω = K}` after every outer update), then fits the final
//! model with FedAvg on the `ω*`-weighted objective over the full local
//! training data.

use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::{
    build_balanced_validation, partition_iid, partition_noniid, split_train_test, TabularDataset,
};
use crate::diagnostics::MetricsSink;
use crate::engine::{Algorithm, RunConfig, RunResult, SimplexConstraint, Simulation};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngStream, Vector};
use crate::oracle::{
    check_point, sample_average, BatchKind, BilevelOracle, DeclaredConstants, Minibatch,
};

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

/// `θᵀ[x; 1]` for a model with the intercept stored last.
pub fn logit(theta: &Vector, row: &[f64]) -> f64 {
    let d = row.len();
    let w = &theta.as_slice()[..d];
    w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + theta[d]
}

/// `1[σ(θᵀx̃) >= 0.5]`.
pub fn predict_positive(theta: &Vector, row: &[f64]) -> bool {
    sigmoid(logit(theta, row)) >= 0.5
}

/// Logistic loss `log(1 + e^z) - y z` at logit `z`.
fn logistic_loss(z: f64, label: u8) -> f64 {
    softplus(z) - f64::from(label) * z
}

/// Adds `scale · [row; 1]` to `out`.
fn add_augmented(out: &mut Vector, scale: f64, row: &[f64]) {
    let d = row.len();
    let o = out.as_mut_slice();
    for (oi, ri) in o[..d].iter_mut().zip(row) {
        *oi += scale * ri;
    }
    o[d] += scale;
}

fn augmented_dot(row: &[f64], v: &Vector) -> f64 {
    logit(v, row)
}

fn max_augmented_norm_sq(ds: &TabularDataset) -> f64 {
    (0..ds.len())
        .map(|i| ds.row(i).iter().map(|v| v * v).sum::<f64>() + 1.0)
        .fold(0.0, f64::max)
}

/// One client's data.
#[derive(Debug, Clone, PartialEq)]
pub struct FairFlClient {
    pub train: TabularDataset,
    /// Group-balanced validation rows, drawn from the local training data.
    pub validation: TabularDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairFlSpec {
    pub clients: Vec<FairFlClient>,
    /// Ridge weight `λ`; also the strong-convexity modulus of the inner problem.
    pub lambda: f64,
    pub num_groups: usize,
}

impl FairFlSpec {
    pub const DEFAULT_LAMBDA: f64 = 1e-2;

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Empty("fairfl: clients"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("lambda", "must be positive"));
        }
        if self.num_groups == 0 {
            return Err(Error::config("num_groups", "must be at least 1"));
        }
        let d = self.clients[0].train.num_features();
        for c in &self.clients {
            for ds in [&c.train, &c.validation] {
                if ds.num_groups != self.num_groups {
                    return Err(Error::DimensionMismatch {
                        expected: self.num_groups,
                        found: ds.num_groups,
                    });
                }
                if ds.num_features() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: ds.num_features(),
                    });
                }
            }
            c.train.require_all_groups()?;
            let counts = c.validation.group_counts();
            if c.validation.is_empty() || counts.iter().any(|&n| n != counts[0]) {
                return Err(Error::config(
                    "validation",
                    "every client needs a nonempty group-balanced validation set",
                ));
            }
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.clients[0].train.num_features()
    }

    /// Training rows plus validation rows of client `m`, the data FedAvg fits in stage 2.
    pub fn full_local_train(&self, m: usize) -> Result<TabularDataset> {
        let c = &self.clients[m];
        TabularDataset::concat(&[c.train.clone(), c.validation.clone()])
    }
}

/// Bilevel oracle of one client: `x = ω`, `y = θ`.
#[derive(Debug, Clone)]
pub struct FairFlOracle {
    train: TabularDataset,
    validation: TabularDataset,
    lambda: f64,
    num_groups: usize,
    smoothness: f64,
}

impl FairFlOracle {
    pub fn new(spec: &FairFlSpec, client: usize) -> Result<Self> {
        let c = spec.clients.get(client).ok_or(Error::config(
            "client",
            alloc::format!("index {client} out of range"),
        ))?;
        c.train.require_all_groups()?;
        if c.validation.is_empty() {
            return Err(Error::Empty("fairfl: validation set"));
        }
        if !(spec.lambda > 0.0) {
            return Err(Error::config("lambda", "must be positive"));
        }
        let k = spec.num_groups as f64;
        let smoothness = k / 4.0 * max_augmented_norm_sq(&c.train) + spec.lambda;
        Ok(FairFlOracle {
            train: c.train.clone(),
            validation: c.validation.clone(),
            lambda: spec.lambda,
            num_groups: spec.num_groups,
            smoothness,
        })
    }

    pub fn train(&self) -> &TabularDataset {
        &self.train
    }

    pub fn validation(&self) -> &TabularDataset {
        &self.validation
    }

    fn weight(&self, omega: &Vector, i: usize) -> f64 {
        omega[self.train.groups[i]]
    }
}

impl BilevelOracle for FairFlOracle {
    fn dim_x(&self) -> usize {
        self.num_groups
    }

    fn dim_y(&self) -> usize {
        self.train.num_features() + 1
    }

    fn num_samples_f(&self) -> usize {
        self.validation.len()
    }

    fn num_samples_g(&self) -> usize {
        self.train.len()
    }

    fn strong_convexity(&self) -> f64 {
        self.lambda
    }

    /// Valid for weights on `{ω >= 0, Σ ω = K}`.
    fn declared_constants(&self) -> Option<DeclaredConstants> {
        Some(DeclaredConstants {
            smoothness: self.smoothness,
            grad_bound_f: f64::INFINITY,
            cross_bound: libm::sqrt(max_augmented_norm_sq(&self.train)) * 2.0,
            cross_lipschitz: f64::INFINITY,
            hessian_lipschitz: f64::INFINITY,
            mu: self.lambda,
        })
    }

    fn f_value(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<f64> {
        check_point(self, x, y)?;
        batch.expect_kind(&[BatchKind::F])?;
        let ds = &self.validation;
        let v = sample_average(batch, ds.len(), 1, |i, out| {
            out[0] += logistic_loss(logit(y, ds.row(i)), ds.labels[i]);
        })?;
        Ok(v[0])
    }

    fn g_value(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<f64> {
        check_point(self, x, y)?;
        batch.expect_kind(&[BatchKind::G, BatchKind::Hessian])?;
        let ds = &self.train;
        let v = sample_average(batch, ds.len(), 1, |i, out| {
            out[0] += self.weight(x, i) * logistic_loss(logit(y, ds.row(i)), ds.labels[i]);
        })?;
        Ok(v[0] + 0.5 * self.lambda * y.norm_sq())
    }

    fn grad_x_f(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        batch.expect_kind(&[BatchKind::F])?;
        batch.check_range(self.validation.len())?;
        Ok(Vector::zeros(self.num_groups))
    }

    fn grad_y_f(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        batch.expect_kind(&[BatchKind::F])?;
        let ds = &self.validation;
        sample_average(batch, ds.len(), self.dim_y(), |i, out| {
            let row = ds.row(i);
            let r = sigmoid(logit(y, row)) - f64::from(ds.labels[i]);
            add_augmented(out, r, row);
        })
    }

    fn grad_y_g(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        batch.expect_kind(&[BatchKind::G])?;
        let ds = &self.train;
        let mut grad = sample_average(batch, ds.len(), self.dim_y(), |i, out| {
            let row = ds.row(i);
            let r = sigmoid(logit(y, row)) - f64::from(ds.labels[i]);
            add_augmented(out, self.weight(x, i) * r, row);
        })?;
        grad.axpy(self.lambda, y);
        Ok(grad)
    }

    fn hvp_yy_g(&self, x: &Vector, y: &Vector, v: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        v.check_dim(self.dim_y())?;
        batch.expect_kind(&[BatchKind::Hessian, BatchKind::G])?;
        let ds = &self.train;
        let mut hv = sample_average(batch, ds.len(), self.dim_y(), |i, out| {
            let row = ds.row(i);
            let s = sigmoid(logit(y, row));
            add_augmented(
                out,
                self.weight(x, i) * s * (1.0 - s) * augmented_dot(row, v),
                row,
            );
        })?;
        hv.axpy(self.lambda, v);
        Ok(hv)
    }

    fn jvp_xy_g(&self, x: &Vector, y: &Vector, v: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        v.check_dim(self.dim_y())?;
        batch.expect_kind(&[BatchKind::G, BatchKind::Hessian])?;
        let ds = &self.train;
        sample_average(batch, ds.len(), self.num_groups, |i, out| {
            let row = ds.row(i);
            let r = sigmoid(logit(y, row)) - f64::from(ds.labels[i]);
            out[ds.groups[i]] += r * augmented_dot(row, v);
        })
    }
}

/// Weighted ridge-logistic objective over one client's data as a single-level
/// oracle (`x = θ`, empty inner variable), for FedAvg.
#[derive(Debug, Clone)]
pub struct WeightedLogisticOracle {
    data: TabularDataset,
    weights: Vector,
    lambda: f64,
}

impl WeightedLogisticOracle {
    pub fn new(data: TabularDataset, weights: Vector, lambda: f64) -> Result<Self> {
        weights.check_dim(data.num_groups)?;
        if data.is_empty() {
            return Err(Error::Empty("weighted logistic: data"));
        }
        Ok(WeightedLogisticOracle {
            data,
            weights,
            lambda,
        })
    }
}

impl BilevelOracle for WeightedLogisticOracle {
    fn dim_x(&self) -> usize {
        self.data.num_features() + 1
    }

    fn dim_y(&self) -> usize {
        0
    }

    fn num_samples_f(&self) -> usize {
        self.data.len()
    }

    fn num_samples_g(&self) -> usize {
        0
    }

    fn strong_convexity(&self) -> f64 {
        self.lambda
    }

    fn f_value(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<f64> {
        check_point(self, x, y)?;
        let ds = &self.data;
        let v = sample_average(batch, ds.len(), 1, |i, out| {
            out[0] += self.weights[ds.groups[i]] * logistic_loss(logit(x, ds.row(i)), ds.labels[i]);
        })?;
        Ok(v[0] + 0.5 * self.lambda * x.norm_sq())
    }

    fn g_value(&self, x: &Vector, y: &Vector, _: &Minibatch) -> Result<f64> {
        check_point(self, x, y)?;
        Ok(0.0)
    }

    fn grad_x_f(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        let ds = &self.data;
        let mut grad = sample_average(batch, ds.len(), self.dim_x(), |i, out| {
            let row = ds.row(i);
            let r = sigmoid(logit(x, row)) - f64::from(ds.labels[i]);
            add_augmented(out, self.weights[ds.groups[i]] * r, row);
        })?;
        grad.axpy(self.lambda, x);
        Ok(grad)
    }

    fn grad_y_f(&self, x: &Vector, y: &Vector, _: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        Ok(Vector::zeros(0))
    }

    fn grad_y_g(&self, x: &Vector, y: &Vector, _: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        Ok(Vector::zeros(0))
    }

    fn hvp_yy_g(&self, x: &Vector, y: &Vector, _: &Vector, _: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        Ok(Vector::zeros(0))
    }

    fn jvp_xy_g(&self, x: &Vector, y: &Vector, _: &Vector, _: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        Ok(Vector::zeros(self.dim_x()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageConfig {
    /// Stage 1: FedBiO or FedBiOAcc over the group weights.
    pub bilevel: RunConfig,
    /// Stage 2: FedAvg on the weighted objective.
    pub fedavg: RunConfig,
    /// Lower bound on every group weight.
    pub floor: f64,
}

impl TwoStageConfig {
    pub const DEFAULT_FLOOR: f64 = 0.01;
}

#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    pub weights: Vector,
    pub model: Vector,
    pub bilevel: RunResult,
    pub fedavg: RunResult,
}

/// Fits the final model with FedAvg on the `weights`-weighted objective over each
/// client's full local training data, starting from `θ = 0`.
pub fn weighted_fedavg(
    spec: &FairFlSpec,
    weights: &Vector,
    cfg: &RunConfig,
    sink: &mut dyn MetricsSink,
) -> Result<RunResult> {
    if cfg.algorithm != Algorithm::FedAvg {
        return Err(Error::config("algorithm", "stage 2 runs fedavg"));
    }
    let oracles = (0..spec.clients.len())
        .map(|m| {
            WeightedLogisticOracle::new(spec.full_local_train(m)?, weights.clone(), spec.lambda)
        })
        .collect::<Result<Vec<_>>>()?;
    let sim = Simulation::new(cfg, &oracles)?;
    sim.run(
        &Vector::zeros(spec.num_features() + 1),
        &Vector::zeros(0),
        sink,
    )
}

/// Stage 1 learns group weights from `ω = 1`, `θ = 0`; stage 2 fits the model.
pub fn two_stage_train(
    spec: &FairFlSpec,
    cfg: &TwoStageConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TwoStageOutcome> {
    spec.validate()?;
    if cfg.bilevel.algorithm == Algorithm::FedAvg {
        return Err(Error::config(
            "algorithm",
            "stage 1 runs fedbio or fedbioacc",
        ));
    }
    let oracles = (0..spec.clients.len())
        .map(|m| FairFlOracle::new(spec, m))
        .collect::<Result<Vec<_>>>()?;
    let k = spec.num_groups;
    let constraint = SimplexConstraint {
        total: k as f64,
        floor: cfg.floor,
    };
    let sim = Simulation::new(&cfg.bilevel, &oracles)?.with_constraint(constraint);
    let bilevel = sim.run(
        &Vector::filled(k, 1.0),
        &Vector::zeros(spec.num_features() + 1),
        sink,
    )?;
    let weights = constraint.project(&bilevel.mean_x())?;
    let fedavg = weighted_fedavg(spec, &weights, &cfg.fedavg, sink)?;
    let model = fedavg.mean_x();
    Ok(TwoStageOutcome {
        weights,
        model,
        bilevel,
        fedavg,
    })
}

/// How the training split is spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Distribution {
    Iid,
    NonIid,
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Distribution::Iid => "iid",
            Distribution::NonIid => "noniid",
        }
    }
}

/// Federated fairness task built from one dataset.
#[derive(Debug, Clone)]
pub struct FederatedSplit {
    pub spec: FairFlSpec,
    /// Union of all client training data (validation rows included).
    pub train: TabularDataset,
    pub test: TabularDataset,
}

/// Stratified train/test split at `train_ratio`, client partition, then a
/// balanced validation set of `validation_per_group` rows per group on each client.
pub fn prepare_federated(
    ds: &TabularDataset,
    num_clients: usize,
    distribution: Distribution,
    train_ratio: f64,
    validation_per_group: usize,
    lambda: f64,
    rng: &mut RngStream,
) -> Result<FederatedSplit> {
    if validation_per_group == 0 {
        return Err(Error::config("validation_per_group", "must be at least 1"));
    }
    let (train, test) = split_train_test(ds, train_ratio, rng)?;
    let shards = match distribution {
        Distribution::Iid => partition_iid(&train, num_clients, rng)?,
        Distribution::NonIid => partition_noniid(&train, num_clients, rng)?,
    };
    let clients = shards
        .iter()
        .map(|shard| {
            let (validation, rest) = build_balanced_validation(shard, validation_per_group, rng)?;
            Ok(FairFlClient {
                train: rest,
                validation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = FairFlSpec {
        clients,
        lambda,
        num_groups: ds.num_groups,
    };
    spec.validate()?;
    Ok(FederatedSplit { spec, train, test })
}

/// Two-group task with a 10:1-style size imbalance and group-specific label mechanisms.
///
/// Features are `(x1, x2, x3)`, i.i.d. standard normal. The majority group's
/// label is `1[x1 + s·ε > 0]`, the minority's `1[x2 + s·ε > 0]`, and `x3` is
/// noise. A single linear model fit to the pooled data follows `x1`, so the
/// minority's true-positive rate lags unless its weight is raised. The group
/// attribute is not a feature.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticFairSpec {
    pub majority: usize,
    pub minority: usize,
    /// Scale `s` of the label noise.
    pub label_noise: f64,
}

impl Default for SyntheticFairSpec {
    fn default() -> Self {
        SyntheticFairSpec {
            majority: 3000,
            minority: 300,
            label_noise: 0.3,
        }
    }
}

pub fn synthetic_two_group(
    spec: &SyntheticFairSpec,
    rng: &mut RngStream,
) -> Result<TabularDataset> {
    let n = spec.majority + spec.minority;
    let mut features = DenseMatrix::zeros(n, 3);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let group = usize::from(i >= spec.majority);
        let x = [rng.normal(), rng.normal(), rng.normal()];
        for (j, v) in x.iter().enumerate() {
            features[(i, j)] = *v;
        }
        let signal = if group == 0 { x[0] } else { x[1] };
        labels.push(u8::from(signal + spec.label_noise * rng.normal() > 0.0));
        groups.push(group);
    }
    let names = vec!["x1".into(), "x2".into(), "x3".into()];
    TabularDataset::new(features, labels, groups, 2, names)
}
