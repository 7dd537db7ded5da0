//! Feedback stabilization and null control of a spectral Galerkin model of
//! the 2D incompressible Navier-Stokes equations on a rectangle, with
//! interior control localized in a subrectangle `ω`.
//!
//! Pipeline: [`grid`] builds the staggered stream-function discretization,
//! [`spectral`] solves the Stokes eigenproblem and the localized Gram
//! matrix, [`constants`] carries the constant chain, feedback laws and the
//! dyadic schedule, [`dynamics`] integrates the Galerkin system and
//! [`experiments`] runs the closed-loop studies. [`config`], [`cache`],
//! [`artifacts`] and [`cli`] are the file-facing layer.

pub mod artifacts;
pub mod cache;
pub mod cli;
pub mod config;
pub mod constants;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod spectral;

pub use error::{Error, Result};
