//! Numerical laboratory for sparse bounds of singular and maximal Radon
//! transforms on periodic dyadic grids.

pub mod cli;
pub mod decomp;
pub mod error;
mod fft;
pub mod lattice;
pub mod measures;
pub mod operators;
pub mod scalespace;
pub mod sparse;

pub use error::{Error, Result};
