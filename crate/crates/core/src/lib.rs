//! Mean field game (MFG) and mean field control (MFC) evacuation models on
//! gridded domains whose obstacles and doors change at prescribed times.
//!
//! The coupled HJB and Fokker–Planck system is discretized with an implicit
//! finite-difference scheme and a monotone Godunov Hamiltonian, then solved as
//! one space-time nonlinear system by a matrix-free Newton–Krylov method with
//! viscosity continuation.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod grid;
pub mod hamiltonian;
mod linalg;
pub mod newton;
pub mod residual;
pub mod scenario;
pub mod switching;

pub use error::{Error, Result};
