//! Spectral construction kit for oscillatory "wild" solutions of
//! non-dissipative active scalar equations on the periodic torus.
//!
//! The crate builds localized oscillatory solutions of the relaxed transport
//! system along wave-cone directions, drives them through a staged
//! convex-integration iteration toward the pointwise constraint set
//! q = theta u with |theta| = 1, and verifies every quantitative property of
//! the construction (divergence-freeness, multiplier relation, dwell
//! measures, Fourier-cone confinement, energy growth).
//!
//! Everything is generic over the scalar type through [`scalar::Real`];
//! `f64` aliases are exported at the crate root.

pub mod error;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod integrator;
pub mod io;
pub mod scalar;
pub mod symbols;
pub mod verify;
pub mod wave;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete f64 aliases for the common types.
pub type Grid64 = grid::GridSpec<f64>;
pub type Symbol64 = symbols::MultiplierSymbol<f64>;
pub type Patch64 = symbols::RegularPatch<f64>;
pub type Field64 = field::SpectralField<f64>;
pub type State64 = field::StateField<f64>;
pub type StateMatrix64 = geometry::StateMatrix<f64>;
pub type Screens64 = geometry::Screens<f64>;
pub type Params64 = integrator::ConstructionParams<f64>;

/// Concrete f32 aliases (reduced-precision runs).
pub type Grid32 = grid::GridSpec<f32>;
pub type Symbol32 = symbols::MultiplierSymbol<f32>;
pub type Field32 = field::SpectralField<f32>;
