//! Decentralized primal-dual interior point solver for partially separable
//! nonlinear programs, with a decentralized conjugate-gradient inner solver
//! and simulated message accounting.

// `!(x > 0.0)` style tests deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod dcg;
pub mod dip;
pub mod error;
pub mod format;
pub mod kkt;
pub mod netsim;
pub mod opf;
pub mod poly;
pub mod problem;
pub mod problems;
pub mod runner;

pub use error::{Error, Result};
