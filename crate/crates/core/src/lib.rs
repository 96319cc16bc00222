//! Numerical laboratory for the anisotropic perfect-conductivity problem:
//! norm calculus, Wulff-shape geometry, closed-form asymptotics, a graded
//! finite-element solver, and a sweep/fit harness for the gradient
//! blow-up rate between two nearly-touching inclusions.

pub mod analytic;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod harness;
pub mod mesh;
pub mod norms;

pub use error::{Error, Result};
