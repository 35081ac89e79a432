//! Symmetric simple exclusion on discrete tori, its moment and cumulant
//! structure, renormalization constants, and a renormalized parabolic
//! Anderson solver driven by exclusion noise.

pub mod error;
pub mod cumulants;
pub mod exclusion;
pub mod harness;
pub mod kernels;
pub mod lattice;
pub mod markov;
pub mod pam;
pub mod quadrature;
pub mod renorm;
pub mod rng;
pub mod survival;

pub use error::{Error, Result};
