//! Numerical kernel for real Clifford algebras Cl(p,q,r) together with the
//! group machinery (versors, twisted adjoint actions, orthogonal lifts) and a
//! small equivariant-layer stack trained via a built-in reverse-mode tape.
//!
//! Layer cake, bottom to top:
//!
//! * [`algebra`]: dense 2^n-coefficient multivectors and the blade product.
//! * [`subspaces`]: grade / parity / quaternion-type projections, involutions.
//! * [`groups`]: versors, adjoint representations, norm functions, membership
//!   predicates, and the two-way versor <-> orthogonal-matrix correspondence.
//! * [`autodiff`]: minimal tape over the tensor primitives the layers need,
//!   plus Adam.
//! * [`layers`]: quaternion-type linear / product / normalization layers, the
//!   conjugation layer, a scalar gate, and grade-wise baselines.
//! * [`tasks`]: dataset generators (O(5) regression, convex-hull volumes),
//!   training loops, and the equivariance audit.
//!
//! Everything is float64 and deterministic given explicit seeds.

pub mod algebra;
pub mod autodiff;
pub mod error;
pub mod groups;
pub mod layers;
pub mod subspaces;
pub mod tasks;

pub use algebra::{algebra, Algebra, Blade, Multivector, Signature};
pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
