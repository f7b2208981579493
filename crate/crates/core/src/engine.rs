//! Federated simulation loop.
//!
//! `M` clients each hold an outer iterate `x`, an inner iterate `y` and
//! momentum buffers. Every step each client takes one local update; when
//! `(t + 1) mod I == 0` the server averages the outer state. The inner
//! iterate `y` is never averaged.
//!
//! * FedAvg: `x ← x - η ∇f(x; B)`.
//! * FedBiO: alternating `y ← y - γ ∇_y g`, `x ← x - η Φ(x, y)`, both
//!   evaluated at the pre-update point.
//! * FedBiOAcc: STORM-style recursive momentum for both directions with the
//!   step scale `α_t = δ / (u + σ² t)^{1/3}`. On communication the previous
//!   iterate, the momentum and the new iterate are all averaged.
//!
//! Client steps are independent between communications; with the `parallel`
//! feature they run on rayon and produce bitwise the same trajectory as the
//! sequential path.

use alloc::vec::Vec;

use crate::diagnostics::{self, MetricsRecord, MetricsSink};
use crate::error::{Error, Result};
use crate::hypergrad::{
    phi_exact, phi_stochastic, phi_with_batches, HypergradBatches, HypergradEstimator,
    LinearSolveConfig, NeumannConfig,
};
use crate::numerics::{mean_of_vectors, simplex_project, RngStream, Vector};
use crate::oracle::{sample_minibatch, BatchKind, BilevelOracle, Minibatch};
use crate::problems::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Algorithm {
    FedAvg,
    FedBiO,
    FedBiOAcc,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedBiO => "fedbio",
            Algorithm::FedBiOAcc => "fedbioacc",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "fedavg" => Some(Algorithm::FedAvg),
            "fedbio" => Some(Algorithm::FedBiO),
            "fedbioacc" => Some(Algorithm::FedBiOAcc),
            _ => None,
        }
    }
}

/// Which hypergradient estimator the bilevel algorithms use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum EstimatorKind {
    /// Full-batch oracles, conjugate-gradient inverse.
    Exact,
    /// Minibatch oracles, Neumann-series inverse.
    Neumann,
}

/// Everything that parameterizes a run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub num_clients: usize,
    /// Communication interval `I`.
    pub sync_interval: usize,
    pub total_steps: usize,
    /// Inner step `γ`.
    pub gamma: f64,
    /// Outer step `η` (the learning rate for FedAvg).
    pub eta_outer: f64,
    /// Per-step outer steps for FedAvg/FedBiO, overriding `eta_outer` when set.
    pub eta_schedule: Option<Vec<f64>>,
    pub c_nu: f64,
    pub c_omega: f64,
    pub delta: f64,
    pub u: f64,
    pub sigma: f64,
    pub neumann: NeumannConfig,
    pub solve: LinearSolveConfig,
    /// `None` picks `Exact` for FedBiO and `Neumann` for FedBiOAcc.
    pub estimator: Option<EstimatorKind>,
    /// Inner-gradient batch size `|B_y|` (0 = full batch).
    pub batch_y: usize,
    pub seed: u64,
    /// Emit a metrics record every `log_every` steps (and at the last step).
    pub log_every: usize,
    /// Run client steps on the rayon pool when the `parallel` feature is enabled.
    pub parallel: bool,
    /// Monte-Carlo draws for the logged hypergradient bias at client 0; 0 disables it.
    pub bias_mc_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algorithm: Algorithm::FedBiO,
            num_clients: 3,
            sync_interval: 5,
            total_steps: 2000,
            gamma: 0.1,
            eta_outer: 0.1,
            eta_schedule: None,
            c_nu: 1.0,
            c_omega: 1.0,
            delta: 0.1,
            u: 1.0,
            sigma: 1.0,
            neumann: NeumannConfig {
                eta: 0.1,
                q_terms: 10,
                batch_f: 128,
                batch_g: 128,
                batch_hess: 128,
            },
            solve: LinearSolveConfig::default(),
            estimator: None,
            batch_y: 128,
            seed: 0,
            log_every: 1,
            parallel: false,
            bias_mc_samples: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients", "must be at least 1"));
        }
        if self.sync_interval == 0 {
            return Err(Error::config("sync_interval", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        for (field, value) in [("gamma", self.gamma), ("eta_outer", self.eta_outer)] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::config(field, "must be finite and nonnegative"));
            }
        }
        if let Some(schedule) = &self.eta_schedule {
            if schedule.len() < self.total_steps {
                return Err(Error::config(
                    "eta_schedule",
                    alloc::format!(
                        "has {} entries for {} steps",
                        schedule.len(),
                        self.total_steps
                    ),
                ));
            }
            if schedule.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
                return Err(Error::config(
                    "eta_schedule",
                    "entries must be finite and nonnegative",
                ));
            }
        }
        self.solve.validate()?;
        if self.estimator_kind() == EstimatorKind::Neumann {
            self.neumann.validate(None)?;
        }
        if self.algorithm == Algorithm::FedBiOAcc {
            if !(self.delta > 0.0) {
                return Err(Error::config("delta", "must be positive"));
            }
            if !(self.u > 0.0) {
                return Err(Error::config("u", "must be positive"));
            }
            if !(self.sigma >= 0.0) {
                return Err(Error::config("sigma", "must be nonnegative"));
            }
            // α_1 is the largest step scale over t >= 1.
            let a1 = self.alpha(1);
            for (field, c) in [("c_nu", self.c_nu), ("c_omega", self.c_omega)] {
                if !(c >= 0.0) || c * a1 * a1 >= 1.0 {
                    return Err(Error::config(
                        field,
                        alloc::format!("need 0 <= {field} * alpha_1^2 < 1, got {}", c * a1 * a1),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn estimator_kind(&self) -> EstimatorKind {
        self.estimator.unwrap_or(match self.algorithm {
            Algorithm::FedBiOAcc => EstimatorKind::Neumann,
            _ => EstimatorKind::Exact,
        })
    }

    pub fn estimator(&self) -> HypergradEstimator {
        match self.estimator_kind() {
            EstimatorKind::Exact => HypergradEstimator::Exact(self.solve),
            EstimatorKind::Neumann => HypergradEstimator::Neumann(self.neumann),
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        alpha_schedule(self.delta, self.u, self.sigma, t)
    }

    /// Outer step used by FedAvg/FedBiO at step `t` (1-based).
    pub fn outer_step(&self, t: usize) -> f64 {
        match &self.eta_schedule {
            Some(s) => s[t - 1],
            None => self.eta_outer,
        }
    }

    pub fn communicates_after(&self, t: usize) -> bool {
        (t + 1).is_multiple_of(self.sync_interval)
    }
}

/// `α_t = δ / (u + σ² t)^{1/3}`.
pub fn alpha_schedule(delta: f64, u: f64, sigma: f64, t: usize) -> f64 {
    delta / libm::cbrt(u + sigma * sigma * t as f64)
}

/// Per-client iterates, momentum buffers and random stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub x: Vector,
    pub y: Vector,
    /// Outer direction of the last step (momentum for FedBiOAcc).
    pub nu: Vector,
    /// Inner direction of the last step (momentum for FedBiOAcc).
    pub omega: Vector,
    /// Outer iterate one step earlier; replaced by the average on communication in FedBiOAcc.
    pub x_prev: Vector,
    pub y_prev: Vector,
    pub rng: RngStream,
}

impl ClientState {
    pub fn new(x: Vector, y: Vector, rng: RngStream) -> Self {
        ClientState {
            nu: Vector::zeros(x.dim()),
            omega: Vector::zeros(y.dim()),
            x_prev: x.clone(),
            y_prev: y.clone(),
            x,
            y,
            rng,
        }
    }

    fn same_iterates(&self, other: &ClientState) -> bool {
        self.x == other.x
            && self.y == other.y
            && self.nu == other.nu
            && self.omega == other.omega
            && self.x_prev == other.x_prev
            && self.y_prev == other.y_prev
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.nu.is_finite() && self.omega.is_finite()
    }
}

/// True when two client lists hold bitwise-identical iterates.
pub fn states_identical(a: &[ClientState], b: &[ClientState]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(p, q)| p.same_iterates(q))
}

fn estimate_direction<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    estimator: &HypergradEstimator,
    batches: Option<&HypergradBatches>,
) -> Result<Vector> {
    match estimator {
        HypergradEstimator::Exact(solve) => phi_exact(oracle, x, y, solve),
        HypergradEstimator::Neumann(cfg) => {
            let batches = batches.expect("Neumann estimator needs drawn batches");
            phi_with_batches(oracle, x, y, cfg.eta, batches)
        }
    }
}

/// One FedAvg local step: `x ← x - lr ∇_x f(x, y; B)`.
pub fn fedavg_local_step<O: BilevelOracle + ?Sized>(
    client: &mut ClientState,
    oracle: &O,
    lr: f64,
    batch_size: usize,
) -> Result<()> {
    let batch = sample_minibatch(
        &mut client.rng,
        BatchKind::F,
        batch_size,
        oracle.num_samples_f(),
    );
    let grad = oracle.grad_x_f(&client.x, &client.y, &batch)?;
    client.x_prev = client.x.clone();
    client.x.axpy(-lr, &grad);
    client.nu = grad;
    Ok(())
}

/// One FedBiO local step. Both directions are evaluated at the pre-update point.
pub fn fedbio_local_step<O: BilevelOracle + ?Sized>(
    client: &mut ClientState,
    oracle: &O,
    gamma: f64,
    eta: f64,
    estimator: &HypergradEstimator,
    batch_y: usize,
) -> Result<()> {
    let (omega, nu) = match estimator {
        HypergradEstimator::Exact(solve) => {
            let omega = oracle.grad_y_g(&client.x, &client.y, &Minibatch::full(BatchKind::G))?;
            (omega, phi_exact(oracle, &client.x, &client.y, solve)?)
        }
        HypergradEstimator::Neumann(cfg) => {
            let b_y = sample_minibatch(
                &mut client.rng,
                BatchKind::G,
                batch_y,
                oracle.num_samples_g(),
            );
            let omega = oracle.grad_y_g(&client.x, &client.y, &b_y)?;
            (
                omega,
                phi_stochastic(oracle, &client.x, &client.y, cfg, &mut client.rng)?,
            )
        }
    };
    client.x_prev = client.x.clone();
    client.y_prev = client.y.clone();
    client.y.axpy(-gamma, &omega);
    client.x.axpy(-eta, &nu);
    client.omega = omega;
    client.nu = nu;
    Ok(())
}

/// One FedBiOAcc local step at global step `t` (1-based).
///
/// The first step uses plain estimates. Later steps draw `B_y` and the
/// hypergradient batches once and evaluate them both at the current point and
/// at the stored previous point.
pub fn fedbioacc_local_step<O: BilevelOracle + ?Sized>(
    client: &mut ClientState,
    oracle: &O,
    cfg: &RunConfig,
    t: usize,
) -> Result<()> {
    let estimator = cfg.estimator();
    let b_y = match estimator {
        HypergradEstimator::Exact(_) => Minibatch::full(BatchKind::G),
        HypergradEstimator::Neumann(_) => sample_minibatch(
            &mut client.rng,
            BatchKind::G,
            cfg.batch_y,
            oracle.num_samples_g(),
        ),
    };
    let batches = match estimator {
        HypergradEstimator::Neumann(n) => Some(HypergradBatches::draw(oracle, &n, &mut client.rng)),
        HypergradEstimator::Exact(_) => None,
    };
    let grad_now = oracle.grad_y_g(&client.x, &client.y, &b_y)?;
    let mu_now = estimate_direction(oracle, &client.x, &client.y, &estimator, batches.as_ref())?;
    let (omega, nu) = if t <= 1 {
        (grad_now, mu_now)
    } else {
        let a_prev = cfg.alpha(t - 1);
        let keep_omega = 1.0 - cfg.c_omega * a_prev * a_prev;
        let keep_nu = 1.0 - cfg.c_nu * a_prev * a_prev;
        let grad_prev = oracle.grad_y_g(&client.x_prev, &client.y_prev, &b_y)?;
        let mu_prev = estimate_direction(
            oracle,
            &client.x_prev,
            &client.y_prev,
            &estimator,
            batches.as_ref(),
        )?;
        let mut omega = grad_now;
        omega.axpy(keep_omega, &client.omega.sub(&grad_prev));
        let mut nu = mu_now;
        nu.axpy(keep_nu, &client.nu.sub(&mu_prev));
        (omega, nu)
    };
    let alpha = cfg.alpha(t);
    client.x_prev = client.x.clone();
    client.y_prev = client.y.clone();
    client.y.axpy(-cfg.gamma * alpha, &omega);
    client.x.axpy(-cfg.eta_outer * alpha, &nu);
    client.omega = omega;
    client.nu = nu;
    Ok(())
}

/// Server averaging. Replaces every client's `x` by the mean; FedBiOAcc also
/// averages the stored previous iterate and the outer momentum. `y` is untouched.
pub fn communicate(clients: &mut [ClientState], algorithm: Algorithm) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::Empty("communicate: no clients"));
    }
    let x_bar = mean_of_vectors(clients.iter().map(|c| &c.x))?;
    for c in clients.iter_mut() {
        c.x.clone_from(&x_bar);
    }
    if algorithm == Algorithm::FedBiOAcc {
        let x_prev_bar = mean_of_vectors(clients.iter().map(|c| &c.x_prev))?;
        let nu_bar = mean_of_vectors(clients.iter().map(|c| &c.nu))?;
        for c in clients.iter_mut() {
            c.x_prev.clone_from(&x_prev_bar);
            c.nu.clone_from(&nu_bar);
        }
    }
    Ok(())
}

/// Projection applied to each client's outer iterate after its local update.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimplexConstraint {
    pub total: f64,
    pub floor: f64,
}

impl SimplexConstraint {
    pub fn project(&self, x: &Vector) -> Result<Vector> {
        simplex_project(x, self.total, self.floor)
    }
}

/// Final states and the metrics log of a run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub clients: Vec<ClientState>,
    pub records: Vec<MetricsRecord>,
}

impl RunResult {
    /// Mean outer iterate over clients.
    pub fn mean_x(&self) -> Vector {
        mean_of_vectors(self.clients.iter().map(|c| &c.x)).expect("at least one client")
    }
}

/// Stream id of the diagnostics-only random stream, disjoint from client streams.
const BIAS_STREAM: u64 = u64::MAX - 1;

fn local_step<O: BilevelOracle + ?Sized>(
    cfg: &RunConfig,
    constraint: Option<SimplexConstraint>,
    client: &mut ClientState,
    oracle: &O,
    t: usize,
) -> Result<()> {
    match cfg.algorithm {
        Algorithm::FedAvg => {
            fedavg_local_step(client, oracle, cfg.outer_step(t), cfg.neumann.batch_f)?
        }
        Algorithm::FedBiO => fedbio_local_step(
            client,
            oracle,
            cfg.gamma,
            cfg.outer_step(t),
            &cfg.estimator(),
            cfg.batch_y,
        )?,
        Algorithm::FedBiOAcc => fedbioacc_local_step(client, oracle, cfg, t)?,
    }
    if let Some(c) = constraint {
        client.x = c.project(&client.x)?;
    }
    if !client.is_finite() {
        return Err(Error::NonFinite("client iterate"));
    }
    Ok(())
}

/// A configured federated run over a fixed set of client oracles.
pub struct Simulation<'a, O> {
    cfg: &'a RunConfig,
    oracles: &'a [O],
    truth: Option<&'a dyn GroundTruth>,
    constraint: Option<SimplexConstraint>,
    clock: Option<&'a dyn Fn() -> u64>,
}

impl<'a, O: BilevelOracle> Simulation<'a, O> {
    /// Validates the configuration against the oracles.
    pub fn new(cfg: &'a RunConfig, oracles: &'a [O]) -> Result<Self> {
        cfg.validate()?;
        if oracles.len() != cfg.num_clients {
            return Err(Error::config(
                "num_clients",
                alloc::format!(
                    "{} oracles supplied for {} clients",
                    oracles.len(),
                    cfg.num_clients
                ),
            ));
        }
        let (dx, dy) = (oracles[0].dim_x(), oracles[0].dim_y());
        for o in oracles {
            if o.dim_x() != dx {
                return Err(Error::DimensionMismatch {
                    expected: dx,
                    found: o.dim_x(),
                });
            }
            if o.dim_y() != dy {
                return Err(Error::DimensionMismatch {
                    expected: dy,
                    found: o.dim_y(),
                });
            }
            if cfg.algorithm != Algorithm::FedAvg && cfg.estimator_kind() == EstimatorKind::Neumann
            {
                cfg.neumann.validate(o.smoothness())?;
            }
        }
        Ok(Simulation {
            cfg,
            oracles,
            truth: None,
            constraint: None,
            clock: None,
        })
    }

    /// Log `‖∇h(x̄)‖²` and the inner error from closed-form truth.
    pub fn with_ground_truth(mut self, truth: &'a dyn GroundTruth) -> Self {
        self.truth = Some(truth);
        self
    }

    /// Project every outer iterate onto `{w >= floor, Σ w = total}` after each update.
    pub fn with_constraint(mut self, constraint: SimplexConstraint) -> Self {
        self.constraint = Some(constraint);
        self
    }

    /// Timestamp source (nanoseconds) for `wall_clock_ns`; records carry 0 without one.
    pub fn with_clock(mut self, clock: &'a dyn Fn() -> u64) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn config(&self) -> &RunConfig {
        self.cfg
    }

    /// All clients start from the same `(x1, y1)`; client `m` gets stream `(seed, m)`.
    pub fn initial_states(&self, x1: &Vector, y1: &Vector) -> Result<Vec<ClientState>> {
        x1.check_dim(self.oracles[0].dim_x())?;
        y1.check_dim(self.oracles[0].dim_y())?;
        Ok((0..self.cfg.num_clients)
            .map(|m| {
                ClientState::new(
                    x1.clone(),
                    y1.clone(),
                    RngStream::new(self.cfg.seed, m as u64),
                )
            })
            .collect())
    }

    pub fn run(&self, x1: &Vector, y1: &Vector, sink: &mut dyn MetricsSink) -> Result<RunResult> {
        let states = self.initial_states(x1, y1)?;
        self.run_from(states, sink)
    }

    /// Runs `total_steps` steps starting from explicit client states.
    pub fn run_from(
        &self,
        mut states: Vec<ClientState>,
        sink: &mut dyn MetricsSink,
    ) -> Result<RunResult> {
        if states.len() != self.cfg.num_clients {
            return Err(Error::config(
                "num_clients",
                "state count differs from client count",
            ));
        }
        let mut records = Vec::new();
        let mut bias_rng = RngStream::new(self.cfg.seed, BIAS_STREAM);
        let total = self.cfg.total_steps;
        for t in 1..=total {
            self.step_all(&mut states, t).map_err(|e| e.at_step(t))?;
            if self.cfg.communicates_after(t) {
                communicate(&mut states, self.cfg.algorithm).map_err(|e| e.at_step(t))?;
            }
            if t % self.cfg.log_every == 0 || t == total {
                let record = self
                    .measure(t, &states, &mut bias_rng)
                    .map_err(|e| e.at_step(t))?;
                sink.record(&record);
                records.push(record);
            }
        }
        Ok(RunResult {
            clients: states,
            records,
        })
    }

    fn step_all(&self, states: &mut [ClientState], t: usize) -> Result<()> {
        let cfg = self.cfg;
        let constraint = self.constraint;
        #[cfg(feature = "parallel")]
        if cfg.parallel {
            use rayon::prelude::*;
            return states
                .par_iter_mut()
                .zip(self.oracles.par_iter())
                .try_for_each(|(s, o)| local_step(cfg, constraint, s, o, t));
        }
        states
            .iter_mut()
            .zip(self.oracles)
            .try_for_each(|(s, o)| local_step(cfg, constraint, s, o, t))
    }

    fn measure(
        &self,
        t: usize,
        states: &[ClientState],
        bias_rng: &mut RngStream,
    ) -> Result<MetricsRecord> {
        let xs: Vec<&Vector> = states.iter().map(|c| &c.x).collect();
        let x_bar = mean_of_vectors(xs.iter().copied())?;
        let consensus_error = diagnostics::consensus_error_points(&xs)?;
        let (grad_norm_sq, grad_norm_is_estimate, inner_error) = match self.truth {
            Some(truth) => (
                truth.hypergradient(&x_bar).norm_sq(),
                false,
                Some(diagnostics::inner_error(states, truth)?),
            ),
            None => {
                let nu_bar = mean_of_vectors(states.iter().map(|c| &c.nu))?;
                (nu_bar.norm_sq(), true, None)
            }
        };
        let full_f = Minibatch::full(BatchKind::F);
        let mut outer_loss = 0.0;
        for (s, o) in states.iter().zip(self.oracles) {
            outer_loss += o.f_value(&s.x, &s.y, &full_f)?;
        }
        outer_loss /= states.len() as f64;
        let hypergrad_bias = match self.cfg.estimator() {
            HypergradEstimator::Neumann(n)
                if self.cfg.bias_mc_samples > 0 && self.cfg.algorithm != Algorithm::FedAvg =>
            {
                Some(diagnostics::hypergrad_bias(
                    &self.oracles[0],
                    &states[0].x,
                    &states[0].y,
                    &n,
                    &self.cfg.solve,
                    self.cfg.bias_mc_samples,
                    bias_rng,
                )?)
            }
            _ => None,
        };
        Ok(MetricsRecord {
            t: t as u64,
            grad_norm_sq,
            grad_norm_is_estimate,
            consensus_error,
            inner_error,
            hypergrad_bias,
            alpha_t: (self.cfg.algorithm == Algorithm::FedBiOAcc).then(|| self.cfg.alpha(t)),
            outer_loss,
            wall_clock_ns: self.clock.map_or(0, |c| c()),
        })
    }
}
