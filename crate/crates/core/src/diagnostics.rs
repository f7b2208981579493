//! Quantities tracked during a run: consensus and inner-estimation errors,
//! hypergradient bias, empirical client heterogeneity, and fairness metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::TabularDataset;
use crate::engine::ClientState;
use crate::error::{Error, Result};
use crate::hypergrad::{inner_solve, phi_exact, phi_stochastic, LinearSolveConfig, NeumannConfig};
use crate::numerics::{mean_of_vectors, RngStream, Vector};
use crate::oracle::BilevelOracle;
use crate::problems::fairfl::predict_positive;
use crate::problems::GroundTruth;

/// Definition of the fairness metric, recorded in every log header.
pub const EQOPP_DEFINITION: &str =
    "max over group pairs of |TPR_a - TPR_b|, TPR_a = P(yhat = 1 | y = 1, group = a), yhat = 1[sigmoid(theta . x) >= 0.5]";

/// When records are taken, recorded in every log header.
pub const RECORD_CONVENTION: &str =
    "record t is taken after step t's local updates and any communication at that step; \
     the previous-iterate overwrite performed by FedBiOAcc averaging is not logged";

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRecord {
    pub t: u64,
    /// `‖∇h(x̄_t)‖²` from ground truth, or `‖mean ν‖²` when `grad_norm_is_estimate`.
    pub grad_norm_sq: f64,
    pub grad_norm_is_estimate: bool,
    pub consensus_error: f64,
    pub inner_error: Option<f64>,
    pub hypergrad_bias: Option<f64>,
    pub alpha_t: Option<f64>,
    pub outer_loss: f64,
    pub wall_clock_ns: u64,
}

/// Receives records at measurement points.
pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord);
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, record: &MetricsRecord) {
        self.push(record.clone());
    }
}

/// Discards every record.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricsRecord) {}
}

/// `(1/M) Σ_m ‖x^{(m)} - x̄‖²` over client outer iterates.
pub fn consensus_error(clients: &[ClientState]) -> Result<f64> {
    let xs: Vec<&Vector> = clients.iter().map(|c| &c.x).collect();
    consensus_error_points(&xs)
}

/// `(1/M) Σ_m ‖x_m - x̄‖²` over raw points.
pub fn consensus_error_points(xs: &[&Vector]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("consensus_error: no clients"));
    }
    let mean = mean_of_vectors(xs.iter().copied())?;
    let total: f64 = xs.iter().map(|x| x.sub(&mean).norm_sq()).sum();
    Ok(total / xs.len() as f64)
}

/// `(1/M) Σ_m ‖y^{(m)} - y_{x^{(m)}}^{(m)}‖²` with closed-form inner solutions.
pub fn inner_error(clients: &[ClientState], truth: &dyn GroundTruth) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::Empty("inner_error: no clients"));
    }
    if clients.len() != truth.num_clients() {
        return Err(Error::DimensionMismatch {
            expected: truth.num_clients(),
            found: clients.len(),
        });
    }
    let total: f64 = clients
        .iter()
        .enumerate()
        .map(|(m, c)| c.y.sub(&truth.inner_solution(m, &c.x)).norm_sq())
        .sum();
    Ok(total / clients.len() as f64)
}

/// Inner error with each `y_x` obtained by a Newton solve to gradient norm `1e-10`.
pub fn inner_error_solved<O: BilevelOracle>(clients: &[ClientState], oracles: &[O]) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::Empty("inner_error: no clients"));
    }
    if clients.len() != oracles.len() {
        return Err(Error::DimensionMismatch {
            expected: oracles.len(),
            found: clients.len(),
        });
    }
    let mut total = 0.0;
    for (c, o) in clients.iter().zip(oracles) {
        let y_star = inner_solve(o, &c.x, &c.y, 1e-10, 100)?;
        total += c.y.sub(&y_star).norm_sq();
    }
    Ok(total / clients.len() as f64)
}

/// `‖(1/n) Σ_{k<n} Φ(x, y; B_k) - Φ(x, y)‖` with `n = num_mc` independent draws.
pub fn hypergrad_bias<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    neumann: &NeumannConfig,
    solve: &LinearSolveConfig,
    num_mc: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if num_mc == 0 {
        return Err(Error::config("num_mc", "must be at least 1"));
    }
    let exact = phi_exact(oracle, x, y, solve)?;
    let mut sum = Vector::zeros(exact.dim());
    for _ in 0..num_mc {
        sum.axpy(1.0, &phi_stochastic(oracle, x, y, neumann, rng)?);
    }
    sum.scale(1.0 / num_mc as f64);
    Ok(sum.sub(&exact).norm())
}

/// Ball of outer points probed by [`zeta_hat`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRegion {
    pub center: Vector,
    pub radius: f64,
}

/// Largest pairwise disagreement `max_{m,j} ‖∇h^{(m)}(x) - ∇h^{(j)}(x)‖` over
/// `probes` Gaussian points around `region.center`.
///
/// Per-client hypergradients are `Φ^{(m)}(x, y_x^{(m)})` with `y_x` from a
/// Newton solve, so no closed form is needed.
pub fn zeta_hat<O: BilevelOracle>(
    oracles: &[O],
    probes: usize,
    region: &ProbeRegion,
    rng: &mut RngStream,
) -> Result<f64> {
    if oracles.len() < 2 || probes == 0 {
        return Ok(0.0);
    }
    let solve = LinearSolveConfig::default();
    let dim_x = oracles[0].dim_x();
    region.center.check_dim(dim_x)?;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let mut x = region.center.clone();
        x.axpy(1.0, &rng.normal_vector(dim_x, region.radius));
        let mut grads = Vec::with_capacity(oracles.len());
        for o in oracles {
            let y0 = Vector::zeros(o.dim_y());
            let y_star = inner_solve(o, &x, &y0, 1e-10, 100)?;
            grads.push(phi_exact(o, &x, &y_star, &solve)?);
        }
        for i in 0..grads.len() {
            for j in i + 1..grads.len() {
                worst = worst.max(grads[i].sub(&grads[j]).norm());
            }
        }
    }
    Ok(worst)
}

/// Per-group true-positive rates. Errors on a group without positives.
pub fn true_positive_rates(
    predictions: &[bool],
    labels: &[u8],
    groups: &[usize],
    num_groups: usize,
) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: predictions.len().min(groups.len()),
        });
    }
    let mut positives = vec![0usize; num_groups];
    let mut hits = vec![0usize; num_groups];
    for ((&p, &y), &a) in predictions.iter().zip(labels).zip(groups) {
        if a >= num_groups {
            return Err(Error::DimensionMismatch {
                expected: num_groups,
                found: a + 1,
            });
        }
        if y == 1 {
            positives[a] += 1;
            if p {
                hits[a] += 1;
            }
        }
    }
    positives
        .iter()
        .zip(&hits)
        .enumerate()
        .map(|(a, (&n, &h))| {
            if n == 0 {
                Err(Error::EmptyGroup { group: a })
            } else {
                Ok(h as f64 / n as f64)
            }
        })
        .collect()
}

/// Largest pairwise gap in a list of rates; 0 for fewer than two.
pub fn max_pairwise_gap(rates: &[f64]) -> f64 {
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    if rates.len() < 2 {
        0.0
    } else {
        max - min
    }
}

pub fn eqopp_from_predictions(
    predictions: &[bool],
    labels: &[u8],
    groups: &[usize],
    num_groups: usize,
) -> Result<f64> {
    Ok(max_pairwise_gap(&true_positive_rates(
        predictions,
        labels,
        groups,
        num_groups,
    )?))
}

/// Equal-opportunity gap of the logistic model `theta` (intercept last) on `ds`.
pub fn eqopp(theta: &Vector, ds: &TabularDataset) -> Result<f64> {
    let predictions = predictions(theta, ds)?;
    eqopp_from_predictions(&predictions, &ds.labels, &ds.groups, ds.num_groups)
}

/// Fraction of rows whose thresholded prediction equals the label.
pub fn accuracy(theta: &Vector, ds: &TabularDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("accuracy: dataset"));
    }
    let predictions = predictions(theta, ds)?;
    let correct = predictions
        .iter()
        .zip(&ds.labels)
        .filter(|(p, y)| **p == (**y == 1))
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

fn predictions(theta: &Vector, ds: &TabularDataset) -> Result<Vec<bool>> {
    theta.check_dim(ds.num_features() + 1)?;
    Ok((0..ds.len())
        .map(|i| predict_positive(theta, ds.row(i)))
        .collect())
}
