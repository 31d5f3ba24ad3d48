//! Minimal dense linear algebra and deterministic random generation.

pub mod matrix;
pub mod qr;
pub mod rng;

pub use matrix::{dot, norm2, Matrix};
pub use qr::qr_orthonormal;
pub use rng::Rng;
