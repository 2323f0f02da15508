//! Context-informed dynamics adaptation.
//!
//! A family of dynamical systems is learned jointly: a linear hypernetwork maps
//! a low-dimensional per-environment context `ξ` to model parameters
//! `θ = θc + Wξ`. New environments are fitted by adapting `ξ` alone.

pub mod adaptation;
pub mod analysis;
pub mod error;
pub mod exec;
pub mod format;
pub mod hypernet;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod systems;
pub mod training;

pub use error::{CodaError, Result};
pub use exec::Execution;
