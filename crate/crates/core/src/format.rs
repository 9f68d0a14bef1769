//! Versioned JSON problem-instance files.
//!
//! ```json
//! {
//!   "format": "dip-problem",
//!   "version": 1,
//!   "name": "qp_pair",
//!   "b": [2.0],
//!   "subsystems": [
//!     {
//!       "dim": 1,
//!       "objective": [{"coef": 0.5, "powers": [[0, 2]]}],
//!       "eq": [],
//!       "ineq": [],
//!       "coupling": [[0, 0, 1.0]],
//!       "x0": [0.0]
//!     }
//!   ]
//! }
//! ```
//!
//! Functions are sparse polynomials (see [`crate::poly`]); coupling matrices
//! are `(row, col, value)` triplets with zero-based indices.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{Polynomial, PolynomialModel};
use crate::problem::{CouplingMatrix, PartitionedProblem, Subsystem};

pub const FORMAT_TAG: &str = "dip-problem";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemFile {
    #[serde(default)]
    pub name: String,
    pub dim: usize,
    pub objective: Polynomial,
    #[serde(default)]
    pub eq: Vec<Polynomial>,
    #[serde(default)]
    pub ineq: Vec<Polynomial>,
    #[serde(default)]
    pub coupling: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub b: Vec<f64>,
    pub subsystems: Vec<SubsystemFile>,
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text)?;
        if file.format != FORMAT_TAG {
            return Err(Error::InvalidProblem(format!(
                "unknown format tag {:?}, expected {FORMAT_TAG:?}",
                file.format
            )));
        }
        if file.version != FORMAT_VERSION {
            return Err(Error::InvalidProblem(format!(
                "unsupported problem file version {} (supported: {FORMAT_VERSION})",
                file.version
            )));
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn build(&self) -> Result<PartitionedProblem> {
        let n_c = self.b.len();
        let mut subsystems = Vec::with_capacity(self.subsystems.len());
        for (i, s) in self.subsystems.iter().enumerate() {
            let model = PolynomialModel {
                dim: s.dim,
                objective: s.objective.clone(),
                eq: s.eq.clone(),
                ineq: s.ineq.clone(),
            };
            if let Some(v) = model.max_var().filter(|&v| v >= s.dim) {
                return Err(Error::InvalidProblem(format!(
                    "subsystem {i}: variable index {v} out of range for dim {}",
                    s.dim
                )));
            }
            let coupling = CouplingMatrix::from_triplets(n_c, s.dim, &s.coupling)?;
            let mut sub = Subsystem::new(Arc::new(model), coupling).with_name(s.name.clone());
            if let Some(x0) = &s.x0 {
                sub = sub.with_initial_x(DVector::from_column_slice(x0));
            }
            subsystems.push(sub);
        }
        Ok(
            PartitionedProblem::new(subsystems, DVector::from_column_slice(&self.b))?
                .with_name(if self.name.is_empty() { "file" } else { &self.name }),
        )
    }
}
