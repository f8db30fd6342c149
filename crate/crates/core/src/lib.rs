//! Constructive compiler from column-symmetric polynomials to explicit
//! single-head Transformer weights.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: dense matrices, ReLU and the column-wise softmax.
//! * [`networks`]: ReLU FNN and Transformer weight sets, evaluators,
//!   combinators, size accounting and JSON serialization.
//! * [`sawtooth`]: tent/sawtooth maps, the squaring approximator and the
//!   product gadgets, both as reference functions and as networks.
//! * [`combinatorics`]: multi-indices, rank tuples and exact counting.
//! * [`polyoracle`]: exact polynomials over matrix entries, monomial
//!   column-symmetric polynomials and the basis decomposition.
//! * [`constructor`]: the staged construction (monomial bank, summation
//!   attention, rank recursion, final readout).
//! * [`harness`]: error measurement, bound audits, sweeps and the CLI.

pub mod combinatorics;
pub mod constructor;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod networks;
pub mod polyoracle;
pub mod sawtooth;

pub use error::{Error, Result};
pub use linalg::Matrix;
