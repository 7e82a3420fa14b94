//! Probabilistic role mining.
//!
//! Infers role-based access control configurations from a binary
//! user-permission matrix. Two models are provided:
//!
//! * [`mac`]: multi-assignment clustering with a mixture noise process, fit
//!   by deterministic-annealing EM.
//! * [`ddm`]: a two-level disjoint decomposition with Dirichlet-process
//!   priors, fit by Gibbs sampling.
//!
//! [`hybrid`] adds business attributes to the MAC objective, [`eval`] scores
//! configurations by nearest-neighbour transfer to held-out users, and
//! [`synth`] generates data with known ground truth.
//!
//! The likelihood and annealing code is generic over [`Real`]; the aliases
//! below fix it to `f64`, which is what the CLI uses.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ddm;
pub mod error;
pub mod eval;
pub mod formats;
pub mod hybrid;
pub mod likelihood;
pub mod mac;
pub mod matrix;
pub mod rbac;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::{bool_mat_prod, collapse_hierarchy, hamming, BinaryMatrix, BinaryMatrixBuilder};
pub use rbac::{FlatRbacConfig, HierRbacConfig, ModelKind};
pub use scalar::Real;

pub type ProbMatrix = likelihood::ProbMatrix<f64>;
pub type MacParams = mac::MacParams<f64>;
pub type Responsibilities = mac::Responsibilities<f64>;
pub type MacFit = mac::MacFit<f64>;
pub type HybridFit = hybrid::HybridFit<f64>;

pub type ProbMatrix32 = likelihood::ProbMatrix<f32>;
pub type MacParams32 = mac::MacParams<f32>;
pub type Responsibilities32 = mac::Responsibilities<f32>;
