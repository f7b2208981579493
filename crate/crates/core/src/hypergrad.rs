//! Hypergradients of the bilevel objective.
//!
//! For a point `(x, y)` the hypergradient surrogate is
//!
//! ```text
//! Φ(x, y) = ∇_x f(x, y) - ∇²_xy g(x, y) [∇²_yy g(x, y)]⁻¹ ∇_y f(x, y)
//! ```
//!
//! which equals `∇h(x)` at `y = y_x`. [`phi_exact`] solves the inner linear
//! system with conjugate gradients; [`phi_stochastic`] replaces the inverse
//! with a truncated Neumann series whose factors use independent Hessian
//! minibatches.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{conjugate_gradient, RngStream, Vector};
use crate::oracle::{check_point, sample_minibatch, BatchKind, BilevelOracle, Minibatch};

/// Settings of the stochastic Neumann-series estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct NeumannConfig {
    /// Series step; must satisfy `eta * L < 1`.
    pub eta: f64,
    /// Number of Hessian factors `Q`.
    pub q_terms: usize,
    /// Outer-sample batch size (0 = full batch).
    pub batch_f: usize,
    /// Inner-sample batch size for the cross derivative (0 = full batch).
    pub batch_g: usize,
    /// Inner-sample batch size per Hessian factor (0 = full batch).
    pub batch_hess: usize,
}

impl Default for NeumannConfig {
    fn default() -> Self {
        NeumannConfig {
            eta: 0.1,
            q_terms: 10,
            batch_f: 0,
            batch_g: 0,
            batch_hess: 0,
        }
    }
}

impl NeumannConfig {
    pub fn deterministic(eta: f64, q_terms: usize) -> Self {
        NeumannConfig {
            eta,
            q_terms,
            batch_f: 0,
            batch_g: 0,
            batch_hess: 0,
        }
    }

    pub fn validate(&self, declared_smoothness: Option<f64>) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::config("neumann.eta", "must be positive and finite"));
        }
        if let Some(l) = declared_smoothness {
            if self.eta * l >= 1.0 {
                return Err(Error::config(
                    "neumann.eta",
                    alloc::format!("eta * L = {} must be < 1", self.eta * l),
                ));
            }
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.batch_f == 0 && self.batch_g == 0 && self.batch_hess == 0
    }
}

/// Conjugate-gradient settings for the exact inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LinearSolveConfig {
    pub tol: f64,
    /// `None` means `10 * dim_y`.
    pub max_iter: Option<usize>,
}

impl Default for LinearSolveConfig {
    fn default() -> Self {
        LinearSolveConfig {
            tol: 1e-10,
            max_iter: None,
        }
    }
}

impl LinearSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::config("solve.tol", "must be positive"));
        }
        if self.max_iter == Some(0) {
            return Err(Error::config("solve.max_iter", "must be at least 1"));
        }
        Ok(())
    }

    fn iterations_for(&self, dim_y: usize) -> usize {
        self.max_iter.unwrap_or(10 * dim_y.max(1))
    }
}

/// How a client turns oracle queries into an outer search direction.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum HypergradEstimator {
    /// Full-batch oracles with a conjugate-gradient inverse.
    Exact(LinearSolveConfig),
    /// Minibatch oracles with the truncated Neumann series.
    Neumann(NeumannConfig),
}

/// `Φ(x, y)` with the inverse Hessian applied by conjugate gradients.
pub fn phi_exact<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    cfg: &LinearSolveConfig,
) -> Result<Vector> {
    check_point(oracle, x, y)?;
    let full_f = Minibatch::full(BatchKind::F);
    let full_g = Minibatch::full(BatchKind::G);
    let gx = oracle.grad_x_f(x, y, &full_f)?;
    let gy = oracle.grad_y_f(x, y, &full_f)?;
    let z = inverse_hessian_apply(oracle, x, y, &gy, cfg)?;
    let correction = oracle.jvp_xy_g(x, y, &z, &full_g)?;
    Ok(gx.sub(&correction))
}

/// `[∇²_yy g(x, y)]⁻¹ v` by conjugate gradients on full-batch Hessian-vector products.
pub fn inverse_hessian_apply<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    v: &Vector,
    cfg: &LinearSolveConfig,
) -> Result<Vector> {
    let full_h = Minibatch::full(BatchKind::Hessian);
    let sol = conjugate_gradient(
        |p| oracle.hvp_yy_g(x, y, p, &full_h),
        v,
        cfg.tol,
        cfg.iterations_for(oracle.dim_y()),
    )?;
    Ok(sol.x)
}

/// The independent minibatches consumed by one stochastic hypergradient.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergradBatches {
    pub f: Minibatch,
    pub g: Minibatch,
    /// Hessian batches for factors `j = 1..=Q`, stored at index `j - 1`.
    pub hess: Vec<Minibatch>,
}

impl HypergradBatches {
    pub fn draw<O: BilevelOracle + ?Sized>(
        oracle: &O,
        cfg: &NeumannConfig,
        rng: &mut RngStream,
    ) -> Self {
        let f = sample_minibatch(rng, BatchKind::F, cfg.batch_f, oracle.num_samples_f());
        let g = sample_minibatch(rng, BatchKind::G, cfg.batch_g, oracle.num_samples_g());
        let hess = (0..cfg.q_terms)
            .map(|_| {
                sample_minibatch(
                    rng,
                    BatchKind::Hessian,
                    cfg.batch_hess,
                    oracle.num_samples_g(),
                )
            })
            .collect();
        HypergradBatches { f, g, hess }
    }

    pub fn full(q_terms: usize) -> Self {
        HypergradBatches {
            f: Minibatch::full(BatchKind::F),
            g: Minibatch::full(BatchKind::G),
            hess: (0..q_terms)
                .map(|_| Minibatch::full(BatchKind::Hessian))
                .collect(),
        }
    }
}

/// `η Σ_{k=0}^{Q} P_k v` where `P_0 = I` and `P_k = (I - η H_{Q-k+1}) P_{k-1}`.
///
/// The factor for batch `j` is applied at position `j`, right to left, so the
/// last batch acts first.
pub fn neumann_apply_with_batches<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    v: &Vector,
    eta: f64,
    hess_batches: &[Minibatch],
) -> Result<Vector> {
    v.check_dim(oracle.dim_y())?;
    let mut term = v.clone();
    let mut sum = v.clone();
    for batch in hess_batches.iter().rev() {
        batch.expect_kind(&[BatchKind::Hessian, BatchKind::G])?;
        let hv = oracle.hvp_yy_g(x, y, &term, batch)?;
        term.axpy(-eta, &hv);
        sum.axpy(1.0, &term);
    }
    sum.scale(eta);
    Ok(sum)
}

/// Stochastic Neumann approximation of `[∇²_yy g]⁻¹ v` with `Q` fresh Hessian batches.
pub fn neumann_inverse_apply<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    v: &Vector,
    cfg: &NeumannConfig,
    rng: &mut RngStream,
) -> Result<Vector> {
    check_point(oracle, x, y)?;
    let hess: Vec<Minibatch> = (0..cfg.q_terms)
        .map(|_| {
            sample_minibatch(
                rng,
                BatchKind::Hessian,
                cfg.batch_hess,
                oracle.num_samples_g(),
            )
        })
        .collect();
    neumann_apply_with_batches(oracle, x, y, v, cfg.eta, &hess)
}

/// `Φ(x, y; B)` for an explicit set of minibatches.
///
/// The same outer batch feeds both `∇_x f` and `∇_y f`.
pub fn phi_with_batches<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    eta: f64,
    batches: &HypergradBatches,
) -> Result<Vector> {
    check_point(oracle, x, y)?;
    let gx = oracle.grad_x_f(x, y, &batches.f)?;
    let gy = oracle.grad_y_f(x, y, &batches.f)?;
    if gy.max_abs() == 0.0 {
        return Ok(gx);
    }
    let z = neumann_apply_with_batches(oracle, x, y, &gy, eta, &batches.hess)?;
    let correction = oracle.jvp_xy_g(x, y, &z, &batches.g)?;
    Ok(gx.sub(&correction))
}

/// Stochastic hypergradient with freshly drawn, mutually independent batches.
pub fn phi_stochastic<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    cfg: &NeumannConfig,
    rng: &mut RngStream,
) -> Result<Vector> {
    let batches = HypergradBatches::draw(oracle, cfg, rng);
    phi_with_batches(oracle, x, y, cfg.eta, &batches)
}

/// Minimizes `g(x, ·)` from `y0` by damped Newton steps with a CG inner solve.
///
/// Stops when `‖∇_y g‖ <= tol`.
pub fn inner_solve<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y0: &Vector,
    tol: f64,
    max_newton: usize,
) -> Result<Vector> {
    check_point(oracle, x, y0)?;
    let full_g = Minibatch::full(BatchKind::G);
    let solve = LinearSolveConfig {
        tol: 1e-12,
        max_iter: Some(20 * oracle.dim_y().max(1)),
    };
    let mut y = y0.clone();
    let mut grad = oracle.grad_y_g(x, &y, &full_g)?;
    for _ in 0..max_newton {
        let gnorm = grad.norm();
        if gnorm <= tol {
            return Ok(y);
        }
        let step = inverse_hessian_apply(oracle, x, &y, &grad, &solve)?;
        let value = oracle.g_value(x, &y, &full_g)?;
        let slope = grad.dot(&step);
        // Below this the Armijo test only sees round-off; the full step is safe this close.
        if slope <= 1e-12 * value.abs().max(1.0) {
            y.axpy(-1.0, &step);
            grad = oracle.grad_y_g(x, &y, &full_g)?;
            continue;
        }
        let mut t = 1.0;
        loop {
            let mut candidate = y.clone();
            candidate.axpy(-t, &step);
            let cand_value = oracle.g_value(x, &candidate, &full_g)?;
            if cand_value <= value - 1e-4 * t * slope || t < 1e-10 {
                y = candidate;
                break;
            }
            t *= 0.5;
        }
        grad = oracle.grad_y_g(x, &y, &full_g)?;
    }
    if grad.norm() <= tol {
        Ok(y)
    } else {
        Err(Error::SolverNotConverged {
            iterations: max_newton,
            residual: grad.norm(),
            target: tol,
        })
    }
}
