//! Continuous-time attention dynamics of transformers on ellipsoids.
//!
//! Tokens live on `E_W = { y : yᵀ W y = 1 }` and evolve under a sum of
//! attention heads. The crate provides the geometry ([`manifold`]), attention
//! coefficients ([`attention`]), the vector field and its projected RK4
//! integrator ([`dynamics`]), the scalar certificates used to detect token
//! consensus ([`diagnostics`]) and declarative, reproducible scenarios
//! ([`scenarios`]).

pub mod attention;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod manifold;
mod rows;
pub mod scenarios;
pub mod verify;

pub use error::{Error, Result};
