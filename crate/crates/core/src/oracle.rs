//! The bilevel oracle contract.
//!
//! A problem instance exposes an outer objective `f(x, y)` and an inner
//! objective `g(x, y)` that is strongly convex in `y`. Only gradients,
//! Hessian-vector and Jacobian-vector products are ever requested; full
//! second-derivative matrices are never materialized.
//!
//! Every query takes a [`Minibatch`]. An empty index list means the exact
//! (full-population) value; otherwise the result is the average over the
//! listed sample indices, an unbiased estimate of the exact value.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};

/// Which sample population a minibatch indexes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum BatchKind {
    /// Samples of the outer objective.
    F,
    /// Samples of the inner objective (gradients and cross derivatives).
    G,
    /// Samples of the inner objective used for a Hessian factor.
    Hessian,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub kind: BatchKind,
    /// Sample indices, with repetition allowed. Empty means full batch.
    pub indices: Vec<usize>,
}

impl Minibatch {
    pub fn full(kind: BatchKind) -> Self {
        Minibatch {
            kind,
            indices: Vec::new(),
        }
    }

    pub fn is_full(&self) -> bool {
        self.indices.is_empty()
    }

    /// Errors unless the batch kind is one of `allowed`.
    pub fn expect_kind(&self, allowed: &[BatchKind]) -> Result<()> {
        if allowed.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::WrongBatchKind {
                expected: allowed[0],
                found: self.kind,
            })
        }
    }

    pub fn check_range(&self, population: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= population) {
            Some(&i) => Err(Error::DimensionMismatch {
                expected: population,
                found: i,
            }),
            None => Ok(()),
        }
    }
}

/// Draws `size` i.i.d. uniform indices (with replacement) from `0..population`.
///
/// `size == 0` or a deterministic oracle (`population == 0`) yields the full batch.
pub fn sample_minibatch(
    rng: &mut RngStream,
    kind: BatchKind,
    size: usize,
    population: usize,
) -> Minibatch {
    if size == 0 || population == 0 {
        return Minibatch::full(kind);
    }
    Minibatch {
        kind,
        indices: (0..size).map(|_| rng.index(population)).collect(),
    }
}

/// Regularity constants a problem may declare for diagnostics.
///
/// Nothing in the optimization loop reads these.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DeclaredConstants {
    /// Smoothness (gradient Lipschitz constant) of `f` and of `g`.
    pub smoothness: f64,
    /// Bound on `‖∇f‖` over the region of interest.
    pub grad_bound_f: f64,
    /// Bound on `‖∇²_xy g‖`.
    pub cross_bound: f64,
    /// Lipschitz constant of `∇²_xy g`.
    pub cross_lipschitz: f64,
    /// Lipschitz constant of `∇²_yy g`.
    pub hessian_lipschitz: f64,
    pub mu: f64,
}

impl DeclaredConstants {
    /// Constant `C` bounding `‖Φ(x, y) - ∇h(x)‖ <= C ‖y_x - y‖`.
    pub fn hypergrad_error_constant(&self) -> f64 {
        let second_order = if self.cross_lipschitz == 0.0 && self.hessian_lipschitz == 0.0 {
            0.0
        } else {
            self.grad_bound_f
                * (self.cross_lipschitz / self.mu
                    + self.hessian_lipschitz * self.cross_bound / (self.mu * self.mu))
        };
        self.smoothness + self.smoothness * self.cross_bound / self.mu + second_order
    }

    /// Lipschitz constant `ρ` of the inner solution map `x -> y_x`.
    pub fn inner_map_lipschitz(&self) -> f64 {
        self.cross_bound / self.mu
    }
}

/// First- and second-order queries of a bilevel problem.
///
/// Implementations are immutable after construction; all randomness lives
/// in the caller's [`RngStream`].
pub trait BilevelOracle: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    /// Size of the outer sample population; 0 for a deterministic oracle.
    fn num_samples_f(&self) -> usize;
    /// Size of the inner sample population; 0 for a deterministic oracle.
    fn num_samples_g(&self) -> usize;
    /// Declared strong-convexity modulus of `g(x, ·)`.
    fn strong_convexity(&self) -> f64;
    /// Declared smoothness of `g`, used to validate Neumann step sizes.
    fn smoothness(&self) -> Option<f64> {
        self.declared_constants().map(|c| c.smoothness)
    }
    fn declared_constants(&self) -> Option<DeclaredConstants> {
        None
    }

    fn f_value(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<f64>;
    fn g_value(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<f64>;
    fn grad_x_f(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<Vector>;
    fn grad_y_f(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<Vector>;
    fn grad_y_g(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<Vector>;
    /// `∇²_yy g(x, y) v`
    fn hvp_yy_g(&self, x: &Vector, y: &Vector, v: &Vector, batch: &Minibatch) -> Result<Vector>;
    /// `∇²_xy g(x, y) v`, an element of the outer space.
    fn jvp_xy_g(&self, x: &Vector, y: &Vector, v: &Vector, batch: &Minibatch) -> Result<Vector>;
}

/// Validates `(x, y)` dimensions against an oracle.
pub fn check_point<O: BilevelOracle + ?Sized>(oracle: &O, x: &Vector, y: &Vector) -> Result<()> {
    x.check_dim(oracle.dim_x())?;
    y.check_dim(oracle.dim_y())
}

/// Averages `term(i, out)` contributions over the batch indices, or over the
/// whole population `0..n` for a full batch.
pub fn sample_average<F>(
    batch: &Minibatch,
    population: usize,
    dim: usize,
    mut term: F,
) -> Result<Vector>
where
    F: FnMut(usize, &mut Vector),
{
    batch.check_range(population)?;
    let mut out = Vector::zeros(dim);
    if batch.is_full() {
        if population == 0 {
            return Err(Error::Empty("sample population"));
        }
        for i in 0..population {
            term(i, &mut out);
        }
        out.scale(1.0 / population as f64);
    } else {
        for &i in &batch.indices {
            term(i, &mut out);
        }
        out.scale(1.0 / batch.indices.len() as f64);
    }
    Ok(out)
}

macro_rules! forward_oracle {
    () => {
        fn dim_x(&self) -> usize {
            (**self).dim_x()
        }
        fn dim_y(&self) -> usize {
            (**self).dim_y()
        }
        fn num_samples_f(&self) -> usize {
            (**self).num_samples_f()
        }
        fn num_samples_g(&self) -> usize {
            (**self).num_samples_g()
        }
        fn strong_convexity(&self) -> f64 {
            (**self).strong_convexity()
        }
        fn smoothness(&self) -> Option<f64> {
            (**self).smoothness()
        }
        fn declared_constants(&self) -> Option<DeclaredConstants> {
            (**self).declared_constants()
        }
        fn f_value(&self, x: &Vector, y: &Vector, b: &Minibatch) -> Result<f64> {
            (**self).f_value(x, y, b)
        }
        fn g_value(&self, x: &Vector, y: &Vector, b: &Minibatch) -> Result<f64> {
            (**self).g_value(x, y, b)
        }
        fn grad_x_f(&self, x: &Vector, y: &Vector, b: &Minibatch) -> Result<Vector> {
            (**self).grad_x_f(x, y, b)
        }
        fn grad_y_f(&self, x: &Vector, y: &Vector, b: &Minibatch) -> Result<Vector> {
            (**self).grad_y_f(x, y, b)
        }
        fn grad_y_g(&self, x: &Vector, y: &Vector, b: &Minibatch) -> Result<Vector> {
            (**self).grad_y_g(x, y, b)
        }
        fn hvp_yy_g(&self, x: &Vector, y: &Vector, v: &Vector, b: &Minibatch) -> Result<Vector> {
            (**self).hvp_yy_g(x, y, v, b)
        }
        fn jvp_xy_g(&self, x: &Vector, y: &Vector, v: &Vector, b: &Minibatch) -> Result<Vector> {
            (**self).jvp_xy_g(x, y, v, b)
        }
    };
}

impl<T: BilevelOracle + ?Sized> BilevelOracle for &T {
    forward_oracle!();
}

impl<T: BilevelOracle + ?Sized> BilevelOracle for Box<T> {
    forward_oracle!();
}
