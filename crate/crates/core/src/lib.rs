//! Federated bilevel optimization core.
//!
//! Everything here is pure computation over `alloc` collections: dense
//! vector arithmetic and seedable RNG streams, the bilevel oracle contract,
//! exact and Neumann-series hypergradients, the FedAvg / FedBiO / FedBiOAcc
//! local-update engine, the synthetic quadratic and group-fair logistic
//! problem families, federated data splits, and the diagnostics tracked
//! during a run. File formats, configuration and the command line live in
//! the companion `fedbio` crate.
//!
//! The crate is `no_std` unless the `std` feature (on by default) is enabled.
//! The `parallel` feature runs client local steps on a rayon pool; results
//! are bitwise identical to sequential execution.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod dataset;
pub mod diagnostics;
pub mod engine;
mod error;
pub mod hypergrad;
pub mod numerics;
pub mod oracle;
pub mod problems;

pub use error::{Error, Result};
pub use numerics::{RngStream, Vector};
pub use oracle::{BatchKind, BilevelOracle, Minibatch};
