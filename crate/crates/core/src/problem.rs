//! Partially separable NLPs and their coupling topology.
//!
//! A problem is a list of subsystems, each owning a local model
//!
//! ```text
//!   min f_i(x_i)  s.t.  g_i(x_i) = 0,  h_i(x_i) <= 0
//! ```
//!
//! plus a coupling matrix `A_i`, tied together by `sum_i A_i x_i = b`.
//! Consensus sets and neighbor sets are derived from the row support of the
//! coupling matrices and drive all inter-agent communication.

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Forward-difference step used when a model does not supply derivatives.
const HESSIAN_GRADIENT_STEP: f64 = 1e-5;
const HESSIAN_VALUE_STEP: f64 = 1e-4;

pub const FD_STEP: f64 = 1e-7;

/// Local objective and constraints of one subsystem.
///
/// Derivative callbacks returning `None` are replaced by forward differences.
/// Implementations must be deterministic and re-entrant.
pub trait LocalModel: Send + Sync {
    fn dim(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;

    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;

    fn eq(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn ineq(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn eq_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn ineq_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Hessian of `f + gamma' g + mu' h` with respect to `x`.
    fn lagrangian_hessian(&self, _x: &DVector<f64>, _gamma: &DVector<f64>, _mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Coupling matrix stored by nonzero rows.
///
/// Only rows with at least one nonzero entry are kept, so the key set is
/// exactly the consensus set of the owning subsystem.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMatrix {
    n_rows: usize,
    n_cols: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl CouplingMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            rows: BTreeMap::new(),
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &(r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::InvalidProblem(format!(
                    "coupling triplet ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            rows.entry(r).or_insert_with(|| vec![0.0; n_cols])[c] += v;
        }
        rows.retain(|_, row| row.iter().any(|&v| v != 0.0));
        Ok(Self { n_rows, n_cols, rows })
    }

    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let rows = (0..dense.nrows())
            .filter_map(|r| {
                let row: Vec<f64> = dense.row(r).iter().copied().collect();
                row.iter().any(|&v| v != 0.0).then_some((r, row))
            })
            .collect();
        Self {
            n_rows: dense.nrows(),
            n_cols: dense.ncols(),
            rows,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for (&r, row) in &self.rows {
            for (c, &v) in row.iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        m
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Sorted indices of nonzero rows.
    pub fn support(&self) -> Vec<usize> {
        self.rows.keys().copied().collect()
    }

    pub fn row(&self, r: usize) -> Option<&[f64]> {
        self.rows.get(&r).map(Vec::as_slice)
    }

    pub fn nonzero_rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&r, row)| (r, row.as_slice()))
    }

    /// `A x` as a full `n_rows` vector.
    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_rows);
        for (&r, row) in &self.rows {
            out[r] = dot(row, x.as_slice());
        }
        out
    }

    /// `A x` restricted to the support rows, in support order.
    pub fn mul_support(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.values().map(|row| dot(row, x.as_slice())))
    }

    /// `A' y` where `y` holds values for the support rows only.
    pub fn transpose_mul_support(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.rows.len(), "support-vector length");
        let mut out = DVector::zeros(self.n_cols);
        for (row, &w) in self.rows.values().zip(y.iter()) {
            if w != 0.0 {
                for (o, &a) in out.iter_mut().zip(row) {
                    *o += a * w;
                }
            }
        }
        out
    }

    /// Dense `|support| x n_cols` block of the nonzero rows.
    pub fn support_block(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), self.n_cols);
        for (k, row) in self.rows.values().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                m[(k, c)] = v;
            }
        }
        m
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DerivativeKind {
    EqJacobian,
    IneqJacobian,
    LagrangianHessian,
}

impl fmt::Display for DerivativeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DerivativeKind::EqJacobian => "equality Jacobian",
            DerivativeKind::IneqJacobian => "inequality Jacobian",
            DerivativeKind::LagrangianHessian => "Lagrangian Hessian",
        })
    }
}

/// One subsystem: its local model, coupling matrix and optional initial guess.
#[derive(Clone)]
pub struct Subsystem {
    pub name: String,
    model: Arc<dyn LocalModel>,
    coupling: CouplingMatrix,
    initial_x: Option<DVector<f64>>,
}

impl fmt::Debug for Subsystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Subsystem")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("n_eq", &self.n_eq())
            .field("n_ineq", &self.n_ineq())
            .field("coupling", &self.coupling)
            .finish()
    }
}

impl Subsystem {
    pub fn new(model: Arc<dyn LocalModel>, coupling: CouplingMatrix) -> Self {
        Self {
            name: String::new(),
            model,
            coupling,
            initial_x: None,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_initial_x(mut self, x: DVector<f64>) -> Self {
        self.initial_x = Some(x);
        self
    }

    pub fn model(&self) -> &Arc<dyn LocalModel> {
        &self.model
    }

    pub fn coupling(&self) -> &CouplingMatrix {
        &self.coupling
    }

    pub fn initial_x(&self) -> Option<&DVector<f64>> {
        self.initial_x.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn n_eq(&self) -> usize {
        self.model.n_eq()
    }

    pub fn n_ineq(&self) -> usize {
        self.model.n_ineq()
    }

    /// Initial guess, falling back to zeros.
    pub fn start_x(&self) -> DVector<f64> {
        self.initial_x.clone().unwrap_or_else(|| DVector::zeros(self.dim()))
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.model.objective(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.model.gradient(x)
    }

    pub fn eq(&self, x: &DVector<f64>) -> DVector<f64> {
        self.model.eq(x)
    }

    pub fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
        self.model.ineq(x)
    }

    pub fn eq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.model
            .eq_jacobian(x)
            .unwrap_or_else(|| forward_jacobian(|y| self.model.eq(y), x, self.n_eq()))
    }

    pub fn ineq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.model
            .ineq_jacobian(x)
            .unwrap_or_else(|| forward_jacobian(|y| self.model.ineq(y), x, self.n_ineq()))
    }

    /// Gradient of the local Lagrangian `f + gamma' g + mu' h` (no coupling term).
    pub fn lagrangian_gradient(&self, x: &DVector<f64>, gamma: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        let mut grad = self.gradient(x);
        if self.n_eq() > 0 {
            grad += self.eq_jacobian(x).tr_mul(gamma);
        }
        if self.n_ineq() > 0 {
            grad += self.ineq_jacobian(x).tr_mul(mu);
        }
        grad
    }

    pub fn lagrangian_hessian(&self, x: &DVector<f64>, gamma: &DVector<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
        if let Some(h) = self.model.lagrangian_hessian(x, gamma, mu) {
            return h;
        }
        let n = self.dim();
        let analytic_jacobians = (self.n_eq() == 0 || self.model.eq_jacobian(x).is_some())
            && (self.n_ineq() == 0 || self.model.ineq_jacobian(x).is_some());
        let mut h = DMatrix::zeros(n, n);
        if analytic_jacobians {
            for j in 0..n {
                let step = HESSIAN_GRADIENT_STEP * (1.0 + x[j].abs());
                let mut y = x.clone();
                y[j] = x[j] + step;
                let up = self.lagrangian_gradient(&y, gamma, mu);
                y[j] = x[j] - step;
                let down = self.lagrangian_gradient(&y, gamma, mu);
                h.set_column(j, &((up - down) / (2.0 * step)));
            }
        } else {
            let value =
                |y: &DVector<f64>| self.objective(y) + gamma.dot(&self.model.eq(y)) + mu.dot(&self.model.ineq(y));
            let steps: Vec<f64> = x.iter().map(|v| HESSIAN_VALUE_STEP * (1.0 + v.abs())).collect();
            for i in 0..n {
                for j in 0..=i {
                    let at = |si: f64, sj: f64| {
                        let mut y = x.clone();
                        y[i] += si * steps[i];
                        y[j] += sj * steps[j];
                        value(&y)
                    };
                    let d =
                        (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * steps[i] * steps[j]);
                    h[(i, j)] = d;
                    h[(j, i)] = d;
                }
            }
        }
        let sym = (&h + h.transpose()) * 0.5;
        h.copy_from(&sym);
        h
    }

    /// Which derivatives fall back to finite differences at `x`.
    pub fn finite_difference_use(&self, x: &DVector<f64>) -> Vec<DerivativeKind> {
        let mut out = Vec::new();
        if self.n_eq() > 0 && self.model.eq_jacobian(x).is_none() {
            out.push(DerivativeKind::EqJacobian);
        }
        if self.n_ineq() > 0 && self.model.ineq_jacobian(x).is_none() {
            out.push(DerivativeKind::IneqJacobian);
        }
        let gamma = DVector::zeros(self.n_eq());
        let mu = DVector::zeros(self.n_ineq());
        if self.model.lagrangian_hessian(x, &gamma, &mu).is_none() {
            out.push(DerivativeKind::LagrangianHessian);
        }
        out
    }
}

/// Forward-difference Jacobian of `f: R^n -> R^m` at `x`.
pub fn forward_jacobian<F>(f: F, x: &DVector<f64>, m: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let f0 = f(x);
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = FD_STEP * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let fj = f(&xp);
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (fj[i] - f0[i]) / h;
        }
    }
    jac
}

/// The full partially separable problem.
#[derive(Clone, Debug)]
pub struct PartitionedProblem {
    pub name: String,
    subsystems: Vec<Subsystem>,
    b: DVector<f64>,
}

impl PartitionedProblem {
    /// Structural checks only: every coupling matrix must have `b.len()` rows
    /// and as many columns as its subsystem has variables.
    pub fn new(subsystems: Vec<Subsystem>, b: DVector<f64>) -> Result<Self> {
        if subsystems.is_empty() {
            return Err(Error::InvalidProblem("no subsystems".into()));
        }
        for (i, s) in subsystems.iter().enumerate() {
            if s.coupling.n_rows() != b.len() {
                return Err(Error::DimensionMismatch {
                    context: format!("coupling rows of subsystem {i}"),
                    expected: b.len(),
                    found: s.coupling.n_rows(),
                });
            }
            if s.coupling.n_cols() != s.dim() {
                return Err(Error::DimensionMismatch {
                    context: format!("coupling columns of subsystem {i}"),
                    expected: s.dim(),
                    found: s.coupling.n_cols(),
                });
            }
        }
        Ok(Self {
            name: String::from("problem"),
            subsystems,
            b,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn subsystems(&self) -> &[Subsystem] {
        &self.subsystems
    }

    pub fn subsystem(&self, i: usize) -> &Subsystem {
        &self.subsystems[i]
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn n_consensus(&self) -> usize {
        self.b.len()
    }

    /// `(n_x, n_g, n_h)` summed over subsystems.
    pub fn dimensions(&self) -> (usize, usize, usize) {
        self.subsystems.iter().fold((0, 0, 0), |(nx, ng, nh), s| {
            (nx + s.dim(), ng + s.n_eq(), nh + s.n_ineq())
        })
    }

    /// Short identifier used to match traces of the same problem.
    pub fn fingerprint(&self) -> String {
        let (nx, ng, nh) = self.dimensions();
        format!(
            "{}[S={},nx={nx},ng={ng},nh={nh},nc={}]",
            self.name,
            self.len(),
            self.n_consensus()
        )
    }

    pub fn total_objective(&self, point: &PrimalDualPoint) -> f64 {
        self.subsystems
            .iter()
            .zip(&point.parts)
            .map(|(s, p)| s.objective(&p.x))
            .sum()
    }
}

/// Primal-dual variables of one subsystem.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalPoint {
    pub x: DVector<f64>,
    /// Slacks of `h(x) + v = 0`.
    pub v: DVector<f64>,
    /// Multipliers of `g(x) = 0`.
    pub gamma: DVector<f64>,
    /// Multipliers of `h(x) + v = 0`.
    pub mu: DVector<f64>,
}

impl LocalPoint {
    pub fn len(&self) -> usize {
        self.x.len() + self.v.len() + self.gamma.len() + self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacked `(x, v, gamma, mu)`.
    pub fn stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        let mut o = 0;
        for part in [&self.x, &self.v, &self.gamma, &self.mu] {
            out.rows_mut(o, part.len()).copy_from(part);
            o += part.len();
        }
        out
    }

    /// Checks `v > 0` and `mu > 0` componentwise.
    pub fn check_interior(&self, subsystem: usize) -> Result<()> {
        for (what, vec) in [("slack", &self.v), ("inequality multiplier", &self.mu)] {
            if let Some((index, &value)) = vec.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
                return Err(Error::NotInterior {
                    subsystem,
                    what,
                    index,
                    value,
                });
            }
        }
        Ok(())
    }
}

/// `p = (p_1, ..., p_S, lambda)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalDualPoint {
    pub parts: Vec<LocalPoint>,
    pub lambda: DVector<f64>,
}

impl PrimalDualPoint {
    /// Stacked primal variables `(x_1, ..., x_S)`.
    pub fn stacked_x(&self) -> DVector<f64> {
        let n: usize = self.parts.iter().map(|p| p.x.len()).sum();
        DVector::from_iterator(n, self.parts.iter().flat_map(|p| p.x.iter().copied()))
    }

    pub fn check_dimensions(&self, problem: &PartitionedProblem) -> Result<()> {
        if self.parts.len() != problem.len() {
            return Err(Error::DimensionMismatch {
                context: "number of local points".into(),
                expected: problem.len(),
                found: self.parts.len(),
            });
        }
        if self.lambda.len() != problem.n_consensus() {
            return Err(Error::DimensionMismatch {
                context: "consensus multipliers".into(),
                expected: problem.n_consensus(),
                found: self.lambda.len(),
            });
        }
        for (i, (s, p)) in problem.subsystems().iter().zip(&self.parts).enumerate() {
            for (what, expected, found) in [
                ("x", s.dim(), p.x.len()),
                ("v", s.n_ineq(), p.v.len()),
                ("gamma", s.n_eq(), p.gamma.len()),
                ("mu", s.n_ineq(), p.mu.len()),
            ] {
                if expected != found {
                    return Err(Error::DimensionMismatch {
                        context: format!("{what} of subsystem {i}"),
                        expected,
                        found,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Consensus sets `C_i` and neighbor sets `N_i`.
///
/// `N_i` contains `i` itself whenever `C_i` is nonempty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CouplingTopology {
    pub consensus_sets: Vec<Vec<usize>>,
    pub neighbors: Vec<Vec<usize>>,
}

impl CouplingTopology {
    /// Number of subsystems whose consensus set contains each row.
    pub fn row_owner_counts(&self, n_c: usize) -> Vec<usize> {
        let mut counts = vec![0; n_c];
        for set in &self.consensus_sets {
            for &r in set {
                counts[r] += 1;
            }
        }
        counts
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }
}

pub fn build_topology(problem: &PartitionedProblem) -> CouplingTopology {
    let consensus_sets: Vec<Vec<usize>> = problem.subsystems().iter().map(|s| s.coupling().support()).collect();
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); problem.n_consensus()];
    for (i, set) in consensus_sets.iter().enumerate() {
        for &r in set {
            owners[r].push(i);
        }
    }
    let neighbors = consensus_sets
        .iter()
        .map(|set| {
            let mut n: Vec<usize> = set.iter().flat_map(|&r| owners[r].iter().copied()).collect();
            n.sort_unstable();
            n.dedup();
            n
        })
        .collect();
    CouplingTopology {
        consensus_sets,
        neighbors,
    }
}

/// `sum_i A_i x_i - b`.
pub fn consensus_residual(problem: &PartitionedProblem, point: &PrimalDualPoint) -> Result<DVector<f64>> {
    if point.parts.len() != problem.len() {
        return Err(Error::DimensionMismatch {
            context: "number of local points".into(),
            expected: problem.len(),
            found: point.parts.len(),
        });
    }
    let mut r = -problem.b().clone();
    for (i, (s, p)) in problem.subsystems().iter().zip(&point.parts).enumerate() {
        if p.x.len() != s.dim() {
            return Err(Error::DimensionMismatch {
                context: format!("x of subsystem {i}"),
                expected: s.dim(),
                found: p.x.len(),
            });
        }
        r += s.coupling().mul(&p.x);
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Dimension {
        subsystem: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    UncoveredRow {
        row: usize,
    },
    NonFinite {
        subsystem: usize,
        what: &'static str,
    },
    CallbackFailed {
        subsystem: usize,
        what: &'static str,
        message: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension {
                subsystem,
                what,
                expected,
                found,
            } => write!(
                f,
                "subsystem {subsystem}: {what} has dimension {found}, declared {expected}"
            ),
            Violation::UncoveredRow { row } => write!(f, "consensus row {row} uncovered"),
            Violation::NonFinite { subsystem, what } => {
                write!(f, "subsystem {subsystem}: non-finite {what} at probe point")
            }
            Violation::CallbackFailed {
                subsystem,
                what,
                message,
            } => write!(f, "subsystem {subsystem}: {what} failed at probe point: {message}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Derivatives that are approximated by forward differences.
    pub finite_differences: Vec<(usize, DerivativeKind)>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_ok() {
            Ok(self)
        } else {
            let msg: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
            Err(Error::InvalidProblem(msg.join("; ")))
        }
    }
}

fn probe<T>(f: impl FnOnce() -> T) -> std::result::Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| e.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "callback panicked".into())
    })
}

/// Evaluates every callback at the probe point (initial x or zeros) and
/// checks dimensions, finiteness and consensus-row coverage.
pub fn validate_problem(problem: &PartitionedProblem) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut covered = vec![false; problem.n_consensus()];

    for (i, s) in problem.subsystems().iter().enumerate() {
        for r in s.coupling().support() {
            covered[r] = true;
        }
        let n = s.dim();
        let x = s.start_x();
        if x.len() != n {
            report.violations.push(Violation::Dimension {
                subsystem: i,
                what: "initial x",
                expected: n,
                found: x.len(),
            });
            continue;
        }
        let (ng, nh) = (s.n_eq(), s.n_ineq());

        let mut check_vec = |what: &'static str, expected: usize, r: std::result::Result<DVector<f64>, String>| match r
        {
            Err(message) => report.violations.push(Violation::CallbackFailed {
                subsystem: i,
                what,
                message,
            }),
            Ok(v) if v.len() != expected => report.violations.push(Violation::Dimension {
                subsystem: i,
                what,
                expected,
                found: v.len(),
            }),
            Ok(v) if v.iter().any(|z| !z.is_finite()) => {
                report.violations.push(Violation::NonFinite { subsystem: i, what })
            }
            Ok(_) => {}
        };
        check_vec("gradient", n, probe(|| s.gradient(&x)));
        check_vec("equality constraints", ng, probe(|| s.eq(&x)));
        check_vec("inequality constraints", nh, probe(|| s.ineq(&x)));
        check_vec("objective", 1, probe(|| DVector::from_element(1, s.objective(&x))));

        let has_failure = report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::CallbackFailed { subsystem, .. } | Violation::Dimension { subsystem, .. } if *subsystem == i));
        if has_failure {
            continue;
        }

        let mut check_mat =
            |what: &'static str, rows: usize, cols: usize, r: std::result::Result<DMatrix<f64>, String>| match r {
                Err(message) => report.violations.push(Violation::CallbackFailed {
                    subsystem: i,
                    what,
                    message,
                }),
                Ok(m) if m.nrows() != rows || m.ncols() != cols => {
                    let (expected, found) = if m.nrows() != rows {
                        (rows, m.nrows())
                    } else {
                        (cols, m.ncols())
                    };
                    report.violations.push(Violation::Dimension {
                        subsystem: i,
                        what,
                        expected,
                        found,
                    })
                }
                Ok(m) if m.iter().any(|z| !z.is_finite()) => {
                    report.violations.push(Violation::NonFinite { subsystem: i, what })
                }
                Ok(_) => {}
            };
        check_mat("equality Jacobian", ng, n, probe(|| s.eq_jacobian(&x)));
        check_mat("inequality Jacobian", nh, n, probe(|| s.ineq_jacobian(&x)));
        let gamma = DVector::zeros(ng);
        let mu = DVector::zeros(nh);
        check_mat(
            "Lagrangian Hessian",
            n,
            n,
            probe(|| s.lagrangian_hessian(&x, &gamma, &mu)),
        );

        if let Ok(kinds) = probe(|| s.finite_difference_use(&x)) {
            report.finite_differences.extend(kinds.into_iter().map(|k| (i, k)));
        }
    }

    report.violations.extend(
        covered
            .iter()
            .enumerate()
            .filter(|(_, &c)| !c)
            .map(|(row, _)| Violation::UncoveredRow { row }),
    );
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{Polynomial, PolynomialModel};

    fn scalar_qp(a: f64) -> Subsystem {
        let model = PolynomialModel::new(1, Polynomial::quadratic_diag(&[1.0], &[0.0]));
        let coupling = CouplingMatrix::from_dense(&DMatrix::from_element(1, 1, a));
        Subsystem::new(Arc::new(model), coupling)
    }

    fn problem_with_a(rows: &[&[f64]]) -> PartitionedProblem {
        let n_c = rows[0].len();
        let subs = rows
            .iter()
            .map(|col| {
                let model = PolynomialModel::new(1, Polynomial::quadratic_diag(&[1.0], &[0.0]));
                let a = DMatrix::from_column_slice(n_c, 1, col);
                Subsystem::new(Arc::new(model), CouplingMatrix::from_dense(&a))
            })
            .collect();
        PartitionedProblem::new(subs, DVector::zeros(n_c)).unwrap()
    }

    #[test]
    fn qp_pair_validates() {
        let p = PartitionedProblem::new(vec![scalar_qp(1.0), scalar_qp(1.0)], DVector::from_element(1, 2.0)).unwrap();
        let report = validate_problem(&p);
        assert!(report.is_ok(), "{:?}", report.violations);
        assert!(report.finite_differences.is_empty());
    }

    #[test]
    fn zero_support_row_is_reported() {
        let p = PartitionedProblem::new(vec![scalar_qp(0.0), scalar_qp(0.0)], DVector::from_element(1, 1.0)).unwrap();
        let report = validate_problem(&p);
        assert_eq!(report.violations, vec![Violation::UncoveredRow { row: 0 }]);
        assert_eq!(report.violations[0].to_string(), "consensus row 0 uncovered");
    }

    struct BadIneq;
    impl LocalModel for BadIneq {
        fn dim(&self) -> usize {
            1
        }
        fn n_eq(&self) -> usize {
            0
        }
        fn n_ineq(&self) -> usize {
            2
        }
        fn objective(&self, x: &DVector<f64>) -> f64 {
            x[0] * x[0]
        }
        fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
            x * 2.0
        }
        fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(3, x[0])
        }
    }

    struct Panicky;
    impl LocalModel for Panicky {
        fn dim(&self) -> usize {
            1
        }
        fn n_eq(&self) -> usize {
            1
        }
        fn n_ineq(&self) -> usize {
            0
        }
        fn objective(&self, _x: &DVector<f64>) -> f64 {
            0.0
        }
        fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(1)
        }
        fn eq(&self, _x: &DVector<f64>) -> DVector<f64> {
            panic!("domain error")
        }
    }

    #[test]
    fn inequality_dimension_mismatch_is_reported() {
        let s = Subsystem::new(
            Arc::new(BadIneq),
            CouplingMatrix::from_dense(&DMatrix::from_element(1, 1, 1.0)),
        );
        let p = PartitionedProblem::new(vec![s], DVector::zeros(1)).unwrap();
        let report = validate_problem(&p);
        assert_eq!(
            report.violations,
            vec![Violation::Dimension {
                subsystem: 0,
                what: "inequality constraints",
                expected: 2,
                found: 3
            }]
        );
    }

    #[test]
    fn failing_callback_is_a_violation_not_a_crash() {
        let s = Subsystem::new(
            Arc::new(Panicky),
            CouplingMatrix::from_dense(&DMatrix::from_element(1, 1, 1.0)),
        );
        let p = PartitionedProblem::new(vec![s], DVector::zeros(1)).unwrap();
        let report = validate_problem(&p);
        assert!(matches!(
            report.violations.as_slice(),
            [Violation::CallbackFailed { subsystem: 0, message, .. }] if message == "domain error"
        ));
    }

    #[test]
    fn topology_of_three_chain() {
        let p = problem_with_a(&[&[1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0]]);
        let t = build_topology(&p);
        assert_eq!(t.consensus_sets, vec![vec![0], vec![0, 1], vec![1]]);
        assert_eq!(t.neighbors, vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]);
        assert_eq!(build_topology(&p), t);
    }

    #[test]
    fn topology_single_and_dense() {
        let model = PolynomialModel::new(2, Polynomial::quadratic_diag(&[1.0, 1.0], &[0.0, 0.0]));
        let s = Subsystem::new(Arc::new(model), CouplingMatrix::from_dense(&DMatrix::identity(2, 2)));
        let p = PartitionedProblem::new(vec![s], DVector::zeros(2)).unwrap();
        let t = build_topology(&p);
        assert_eq!(t.consensus_sets, vec![vec![0, 1]]);
        assert_eq!(t.neighbors, vec![vec![0]]);

        let dense = problem_with_a(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let t = build_topology(&dense);
        assert!(t.neighbors.iter().all(|n| n == &vec![0, 1, 2]));
    }

    #[test]
    fn residual_examples() {
        let p = PartitionedProblem::new(vec![scalar_qp(1.0), scalar_qp(1.0)], DVector::from_element(1, 2.0)).unwrap();
        let at = |x1: f64, x2: f64| PrimalDualPoint {
            parts: [x1, x2]
                .iter()
                .map(|&x| LocalPoint {
                    x: DVector::from_element(1, x),
                    v: DVector::zeros(0),
                    gamma: DVector::zeros(0),
                    mu: DVector::zeros(0),
                })
                .collect(),
            lambda: DVector::zeros(1),
        };
        assert_eq!(consensus_residual(&p, &at(1.0, 1.0)).unwrap()[0], 0.0);
        assert_eq!(consensus_residual(&p, &at(0.0, 0.0)).unwrap()[0], -2.0);

        let mut bad = at(0.0, 0.0);
        bad.parts.pop();
        assert!(consensus_residual(&p, &bad).is_err());
    }

    #[test]
    fn coupling_matrix_drops_zero_rows() {
        let a = CouplingMatrix::from_triplets(3, 2, &[(0, 0, 1.0), (2, 1, 2.0), (1, 0, 1.0), (1, 0, -1.0)]).unwrap();
        assert_eq!(a.support(), vec![0, 2]);
        let x = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(a.mul(&x).as_slice(), &[3.0, 0.0, 8.0]);
        assert_eq!(a.mul_support(&x).as_slice(), &[3.0, 8.0]);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(a.transpose_mul_support(&y).as_slice(), &[1.0, 2.0]);
        assert_eq!(CouplingMatrix::from_dense(&a.to_dense()), a);
    }

    #[test]
    fn finite_difference_fallback_is_flagged_and_accurate() {
        struct Circle;
        impl LocalModel for Circle {
            fn dim(&self) -> usize {
                2
            }
            fn n_eq(&self) -> usize {
                1
            }
            fn n_ineq(&self) -> usize {
                0
            }
            fn objective(&self, x: &DVector<f64>) -> f64 {
                x[0] + x[1]
            }
            fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
                DVector::from_element(2, 1.0)
            }
            fn eq(&self, x: &DVector<f64>) -> DVector<f64> {
                DVector::from_element(1, x[0] * x[0] + x[1] * x[1] - 1.0)
            }
        }
        let s = Subsystem::new(Arc::new(Circle), CouplingMatrix::zeros(0, 2))
            .with_initial_x(DVector::from_vec(vec![0.5, -0.25]));
        let p = PartitionedProblem::new(vec![s], DVector::zeros(0)).unwrap();
        let report = validate_problem(&p);
        assert!(report.is_ok());
        assert_eq!(
            report.finite_differences,
            vec![(0, DerivativeKind::EqJacobian), (0, DerivativeKind::LagrangianHessian)]
        );
        let s = p.subsystem(0);
        let x = s.start_x();
        let j = s.eq_jacobian(&x);
        assert!((j[(0, 0)] - 1.0).abs() < 1e-6 && (j[(0, 1)] + 0.5).abs() < 1e-6);
        let h = s.lagrangian_hessian(&x, &DVector::from_element(1, 2.0), &DVector::zeros(0));
        assert!((h[(0, 0)] - 4.0).abs() < 1e-5 && h[(0, 1)].abs() < 1e-5);
    }
}
