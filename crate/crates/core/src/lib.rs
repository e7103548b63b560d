//! Continuous matrix product states: transfer operators, regularity checks,
//! gauge transformations, finite and uniform expectation values, tangent
//! vectors, and a lattice discretization used as an independent oracle.

pub mod error;
pub mod linalg;
pub mod species;
pub mod state;
pub mod transfer;
pub mod regularity;
pub mod gauge;
pub mod finite;
pub mod uniform;
pub mod tangent;
pub mod lattice;
pub mod io;
pub mod config;
pub mod report;
pub mod cli;
pub mod random;

pub use error::{CoreError, Error, ErrorClass};
pub use linalg::{CMat, CVec};
pub use num_complex::Complex64 as C64;
pub use species::{build_species_table, Species, SpeciesTable, Statistics};
pub use state::{BoundaryKind, FiniteCmps, TransferDressing, UniformCmps};
