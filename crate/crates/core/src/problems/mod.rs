//! Concrete bilevel problems.
//!
//! * [`quadratic`]: a synthetic family with closed-form inner solutions and
//!   hypergradients, used as ground truth throughout the test suite.
//! * [`fairfl`]: group-weight learning for fair federated logistic regression.

use alloc::vec::Vec;

use crate::numerics::{mean_of_vectors, Vector};

pub mod fairfl;
pub mod quadratic;

pub use fairfl::{
    two_stage_train, FairFlClient, FairFlOracle, FairFlSpec, TwoStageConfig, TwoStageOutcome,
    WeightedLogisticOracle,
};
pub use quadratic::{make_quadratic, QuadraticFamilySpec, QuadraticGroundTruth, QuadraticOracle};

/// Closed-form quantities of a federated bilevel problem.
pub trait GroundTruth: Sync {
    fn num_clients(&self) -> usize;
    /// Inner minimizer `y_x` of client `client`.
    fn inner_solution(&self, client: usize, x: &Vector) -> Vector;
    /// `∇h^{(m)}(x)` for client `client`.
    fn client_hypergradient(&self, client: usize, x: &Vector) -> Vector;
    /// Global objective `h(x) = (1/M) Σ_m f^{(m)}(x, y_x^{(m)})`.
    fn objective(&self, x: &Vector) -> f64;

    /// `∇h(x) = (1/M) Σ_m ∇h^{(m)}(x)`.
    fn hypergradient(&self, x: &Vector) -> Vector {
        let grads: Vec<Vector> = (0..self.num_clients())
            .map(|m| self.client_hypergradient(m, x))
            .collect();
        mean_of_vectors(&grads).expect("ground truth has at least one client")
    }
}
