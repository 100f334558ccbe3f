//! Parametric POD-Galerkin reduced order models for incompressible flow with
//! a pressure Poisson equation, eddy-viscosity and correction closures, and
//! from-scratch neural regressors for learning them.

pub mod closure;
pub mod error;
pub mod grid;
pub mod metrics;
mod io;
pub mod neural;
pub mod operators;
pub mod pipeline;
pub mod pod;
pub mod snapshots;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
