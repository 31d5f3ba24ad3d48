//! Desk-scale laboratory for gradient-balanced softmax losses and
//! classifier-geometry analysis.
//!
//! The crate implements, with exact closed-form gradients throughout:
//!
//! - cross-entropy and its count-reweighted variant whose softmax
//!   denominator carries per-class cardinality ratios, equalizing the
//!   attraction/repulsion components of the classifier-weight gradient;
//! - the attraction/repulsion decomposition of those gradients, per class
//!   pair, with norms;
//! - simplex equiangular-tight-frame reference geometry and the balance
//!   metrics that measure how far a classifier is from it;
//! - synthetic balanced and exponentially long-tailed datasets, an MLP with
//!   hand-derived backprop, SGD with momentum and weight decay, step/cosine
//!   schedules, and an unconstrained-features training mode;
//! - empirical checkers for the gradient-balance bounds (count-ratio
//!   dependence of repulsion-term norms).
//!
//! Everything is `f64` and bit-deterministic per seed.

pub mod analysis;
pub mod checkpoint;
pub mod collapse;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod numkit;

pub use error::{Error, Result};
pub use numkit::{Matrix, Rng};
