//! Decoherence functionals for histories of phase-space cells, built from
//! coherent-state overlap kernels and cross-checked against a truncated
//! Fock-space oracle.

pub mod cli;
pub mod coherent;
pub mod conditioning;
pub mod correlations;
pub mod decfun;
pub mod error;
pub mod markov;
pub mod pancharatnam;
pub mod fock;
pub mod quadrature;
pub mod symbol;
pub mod wigner;

pub use error::{QprocError, Result};
