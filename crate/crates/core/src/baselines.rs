//! Reference solvers: a centralized interior point oracle, a consensus
//! ADMM baseline, and a positive-definiteness check of the Schur matrix.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dcg::assemble_schur;
use crate::dip::{dip_solve, initial_point, Layout, OuterResult, OuterStatus, SolverConfig};
use crate::error::{Error, Result};
use crate::kkt::SchurContribution;
use crate::netsim::{CommStats, Phase, ReduceOp};
use crate::problem::{
    consensus_residual, CouplingMatrix, LocalModel, LocalPoint, PartitionedProblem, PrimalDualPoint, Subsystem,
};

/// All subsystems stacked into one model whose equality constraints are
/// the local equalities followed by the consensus rows `A x - b = 0`.
struct MergedModel {
    subsystems: Vec<Subsystem>,
    b: DVector<f64>,
    x_offsets: Vec<usize>,
    eq_offsets: Vec<usize>,
    ineq_offsets: Vec<usize>,
}

fn offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut out = vec![0];
    for s in sizes {
        out.push(out.last().unwrap() + s);
    }
    out
}

impl MergedModel {
    fn new(problem: &PartitionedProblem) -> Self {
        let subs = problem.subsystems().to_vec();
        Self {
            x_offsets: offsets(subs.iter().map(Subsystem::dim)),
            eq_offsets: offsets(subs.iter().map(Subsystem::n_eq)),
            ineq_offsets: offsets(subs.iter().map(Subsystem::n_ineq)),
            subsystems: subs,
            b: problem.b().clone(),
        }
    }

    fn local_eq(&self) -> usize {
        *self.eq_offsets.last().unwrap()
    }

    fn slice(&self, x: &DVector<f64>, i: usize) -> DVector<f64> {
        x.rows(self.x_offsets[i], self.subsystems[i].dim()).into_owned()
    }
}

impl LocalModel for MergedModel {
    fn dim(&self) -> usize {
        *self.x_offsets.last().unwrap()
    }

    fn n_eq(&self) -> usize {
        self.local_eq() + self.b.len()
    }

    fn n_ineq(&self) -> usize {
        *self.ineq_offsets.last().unwrap()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        (0..self.subsystems.len())
            .map(|i| self.subsystems[i].objective(&self.slice(x, i)))
            .sum()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for (i, s) in self.subsystems.iter().enumerate() {
            g.rows_mut(self.x_offsets[i], s.dim())
                .copy_from(&s.gradient(&self.slice(x, i)));
        }
        g
    }

    fn eq(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_eq());
        let mut coupled = -self.b.clone();
        for (i, s) in self.subsystems.iter().enumerate() {
            let xi = self.slice(x, i);
            out.rows_mut(self.eq_offsets[i], s.n_eq()).copy_from(&s.eq(&xi));
            coupled += s.coupling().mul(&xi);
        }
        out.rows_mut(self.local_eq(), self.b.len()).copy_from(&coupled);
        out
    }

    fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_ineq());
        for (i, s) in self.subsystems.iter().enumerate() {
            out.rows_mut(self.ineq_offsets[i], s.n_ineq())
                .copy_from(&s.ineq(&self.slice(x, i)));
        }
        out
    }

    fn eq_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.n_eq(), self.dim());
        for (i, s) in self.subsystems.iter().enumerate() {
            let xo = self.x_offsets[i];
            j.view_mut((self.eq_offsets[i], xo), (s.n_eq(), s.dim()))
                .copy_from(&s.eq_jacobian(&self.slice(x, i)));
            for (r, row) in s.coupling().nonzero_rows() {
                for (c, &a) in row.iter().enumerate() {
                    j[(self.local_eq() + r, xo + c)] = a;
                }
            }
        }
        Some(j)
    }

    fn ineq_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.n_ineq(), self.dim());
        for (i, s) in self.subsystems.iter().enumerate() {
            j.view_mut((self.ineq_offsets[i], self.x_offsets[i]), (s.n_ineq(), s.dim()))
                .copy_from(&s.ineq_jacobian(&self.slice(x, i)));
        }
        Some(j)
    }

    fn lagrangian_hessian(&self, x: &DVector<f64>, gamma: &DVector<f64>, mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for (i, s) in self.subsystems.iter().enumerate() {
            let gi = gamma.rows(self.eq_offsets[i], s.n_eq()).into_owned();
            let mi = mu.rows(self.ineq_offsets[i], s.n_ineq()).into_owned();
            let xo = self.x_offsets[i];
            h.view_mut((xo, xo), (s.dim(), s.dim()))
                .copy_from(&s.lagrangian_hessian(&self.slice(x, i), &gi, &mi));
        }
        Some(h)
    }
}

/// The problem as a single subsystem without consensus rows; its local KKT
/// matrix is the full unreduced Newton matrix.
pub fn merged_problem(problem: &PartitionedProblem) -> PartitionedProblem {
    let model = MergedModel::new(problem);
    let x0 = DVector::from_iterator(
        model.dim(),
        problem
            .subsystems()
            .iter()
            .flat_map(|s| s.start_x().iter().copied().collect::<Vec<_>>()),
    );
    let n = model.dim();
    let sub = Subsystem::new(Arc::new(model), CouplingMatrix::zeros(0, n))
        .with_name("merged")
        .with_initial_x(x0);
    PartitionedProblem::new(vec![sub], DVector::zeros(0))
        .expect("merged problem is well formed")
        .with_name(format!("{}/merged", problem.name))
}

/// Stacks a partitioned point into the merged layout; `lambda` becomes the
/// tail of the equality multipliers.
pub fn merge_point(point: &PrimalDualPoint) -> PrimalDualPoint {
    let cat = |f: &dyn Fn(&LocalPoint) -> &DVector<f64>| {
        let v: Vec<f64> = point.parts.iter().flat_map(|p| f(p).iter().copied()).collect();
        DVector::from_vec(v)
    };
    let mut gamma: Vec<f64> = point.parts.iter().flat_map(|p| p.gamma.iter().copied()).collect();
    gamma.extend(point.lambda.iter());
    PrimalDualPoint {
        parts: vec![LocalPoint {
            x: cat(&|p| &p.x),
            v: cat(&|p| &p.v),
            gamma: DVector::from_vec(gamma),
            mu: cat(&|p| &p.mu),
        }],
        lambda: DVector::zeros(0),
    }
}

/// Inverse of [`merge_point`].
pub fn split_point(problem: &PartitionedProblem, merged: &LocalPoint) -> PrimalDualPoint {
    let (mut xo, mut eo, mut io) = (0, 0, 0);
    let mut parts = Vec::with_capacity(problem.len());
    for s in problem.subsystems() {
        parts.push(LocalPoint {
            x: merged.x.rows(xo, s.dim()).into_owned(),
            v: merged.v.rows(io, s.n_ineq()).into_owned(),
            gamma: merged.gamma.rows(eo, s.n_eq()).into_owned(),
            mu: merged.mu.rows(io, s.n_ineq()).into_owned(),
        });
        xo += s.dim();
        eo += s.n_eq();
        io += s.n_ineq();
    }
    PrimalDualPoint {
        parts,
        lambda: merged.gamma.rows(eo, problem.n_consensus()).into_owned(),
    }
}

/// `||F^0(p)||_inf` in complementarity form: stationarity, `v o mu`, `g`,
/// `h + v` and `A x - b`.
pub fn optimality_residual(problem: &PartitionedProblem, point: &PrimalDualPoint) -> Result<f64> {
    let mut worst = consensus_residual(problem, point)?.amax();
    for (s, p) in problem.subsystems().iter().zip(&point.parts) {
        let lam = DVector::from_iterator(
            s.coupling().support().len(),
            s.coupling().support().iter().map(|&r| point.lambda[r]),
        );
        let stationarity = s.lagrangian_gradient(&p.x, &p.gamma, &p.mu) + s.coupling().transpose_mul_support(&lam);
        worst = worst
            .max(stationarity.amax())
            .max(p.v.component_mul(&p.mu).amax())
            .max(s.eq(&p.x).amax())
            .max((s.ineq(&p.x) + &p.v).amax());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub problem: String,
    pub x: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    /// Complementarity-form optimality residual.
    pub kkt_residual: f64,
    /// `v < mu` per inequality.
    pub active: Vec<Vec<bool>>,
    /// `v + mu` bounded away from zero per inequality.
    pub strictly_complementary: Vec<Vec<bool>>,
    pub iterations: usize,
}

impl OracleSolution {
    pub fn stacked_x(&self) -> DVector<f64> {
        DVector::from_iterator(self.x.iter().map(Vec::len).sum(), self.x.iter().flatten().copied())
    }

    pub fn to_point(&self) -> PrimalDualPoint {
        let vec = |v: &Vec<f64>| DVector::from_column_slice(v);
        PrimalDualPoint {
            parts: (0..self.x.len())
                .map(|i| LocalPoint {
                    x: vec(&self.x[i]),
                    v: vec(&self.v[i]),
                    gamma: vec(&self.gamma[i]),
                    mu: vec(&self.mu[i]),
                })
                .collect(),
            lambda: vec(&self.lambda),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Oracle defaults: the d-IP defaults with outer tolerance `1e-10`.
pub fn oracle_config() -> SolverConfig {
    SolverConfig {
        epsilon: 1e-10,
        max_outer: 200,
        ..SolverConfig::default()
    }
}

/// Solves the assembled problem with the interior point iteration applied
/// to the unreduced KKT system.
pub fn centralized_ip_solve(problem: &PartitionedProblem, config: &SolverConfig) -> Result<OracleSolution> {
    centralized_ip_solve_traced(problem, config).map(|(solution, _)| solution)
}

/// As [`centralized_ip_solve`], also returning the single-agent outer loop
/// result.
pub fn centralized_ip_solve_traced(
    problem: &PartitionedProblem,
    config: &SolverConfig,
) -> Result<(OracleSolution, OuterResult)> {
    let merged = merged_problem(problem);
    let start = initial_point(&merged, config);
    let result = dip_solve(&merged, &start, config)?;
    if result.status != OuterStatus::Converged {
        return Err(Error::OracleFailure {
            status: result.status.name().into(),
            iterations: result.outer_iterations(),
        });
    }
    let point = split_point(problem, &result.point.parts[0]);
    let rows = |f: &dyn Fn(&LocalPoint) -> &DVector<f64>| -> Vec<Vec<f64>> {
        point.parts.iter().map(|p| f(p).iter().copied().collect()).collect()
    };
    let active = point
        .parts
        .iter()
        .map(|p| p.v.iter().zip(p.mu.iter()).map(|(v, m)| v < m).collect())
        .collect();
    let strict = point
        .parts
        .iter()
        .map(|p| p.v.iter().zip(p.mu.iter()).map(|(v, m)| v + m > 1e-6).collect())
        .collect();
    let solution = OracleSolution {
        problem: problem.fingerprint(),
        x: rows(&|p| &p.x),
        v: rows(&|p| &p.v),
        gamma: rows(&|p| &p.gamma),
        mu: rows(&|p| &p.mu),
        lambda: point.lambda.iter().copied().collect(),
        objective: problem.total_objective(&point),
        kkt_residual: optimality_residual(problem, &point)?,
        active,
        strictly_complementary: strict,
        iterations: result.outer_iterations(),
    };
    Ok((solution, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdReport {
    pub is_spd: bool,
    pub min_eigenvalue: f64,
    pub max_abs_eigenvalue: f64,
}

/// Eigenvalue test of the symmetric part: SPD iff the smallest eigenvalue
/// exceeds `1e-10 * ||S||_2`.
pub fn spd_check_matrix(s: &DMatrix<f64>) -> SpdReport {
    if s.is_empty() {
        return SpdReport {
            is_spd: true,
            min_eigenvalue: f64::INFINITY,
            max_abs_eigenvalue: 0.0,
        };
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let min = eig.min();
    let norm = eig.amax();
    SpdReport {
        is_spd: min > 1e-10 * norm,
        min_eigenvalue: min,
        max_abs_eigenvalue: norm,
    }
}

pub fn schur_spd_check(contributions: &[SchurContribution], n_c: usize) -> SpdReport {
    spd_check_matrix(&assemble_schur(contributions, n_c).0)
}

/// Local objective plus the proximal penalty `rho/2 ||A_C x - t||^2` on the
/// subsystem's consensus rows.
struct AugmentedModel {
    sub: Subsystem,
    rows: DMatrix<f64>,
    target: DVector<f64>,
    rho: f64,
}

impl LocalModel for AugmentedModel {
    fn dim(&self) -> usize {
        self.sub.dim()
    }

    fn n_eq(&self) -> usize {
        self.sub.n_eq()
    }

    fn n_ineq(&self) -> usize {
        self.sub.n_ineq()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let d = &self.rows * x - &self.target;
        self.sub.objective(x) + 0.5 * self.rho * d.norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = &self.rows * x - &self.target;
        self.sub.gradient(x) + self.rows.tr_mul(&d) * self.rho
    }

    fn eq(&self, x: &DVector<f64>) -> DVector<f64> {
        self.sub.eq(x)
    }

    fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
        self.sub.ineq(x)
    }

    fn eq_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.sub.eq_jacobian(x))
    }

    fn ineq_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.sub.ineq_jacobian(x))
    }

    fn lagrangian_hessian(&self, x: &DVector<f64>, gamma: &DVector<f64>, mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.sub.lagrangian_hessian(x, gamma, mu) + self.rows.tr_mul(&self.rows) * self.rho)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rho: f64,
    pub max_iter: usize,
    /// Stop when both primal and dual residuals are below this.
    pub tolerance: f64,
    /// Settings of the local interior point solves.
    pub local: SolverConfig,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iter: 500,
            tolerance: 1e-7,
            local: SolverConfig {
                epsilon: 1e-10,
                ..SolverConfig::default()
            },
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho_admm > 0 required, got {}", self.rho)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "admm tolerance > 0 required, got {}",
                self.tolerance
            )));
        }
        self.local.validate()
    }

    /// Applies `rho`, `max_iter` or `tolerance`; other keys go to the local
    /// solver settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let float = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("admm.{key}: cannot parse {value:?} as a number")))
        };
        match key {
            "rho" => self.rho = float()?,
            "tolerance" => self.tolerance = float()?,
            "max_iter" => {
                self.max_iter = value
                    .parse()
                    .map_err(|_| Error::Config(format!("admm.{key}: cannot parse {value:?} as a count")))?
            }
            _ => self.local.set(key, value)?,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmRecord {
    pub k: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    pub local_solves: usize,
    /// Newton iterations spent in this round's local solves.
    pub local_newton: usize,
    pub failed_local: usize,
    pub comm_global: u64,
    pub comm_neighbor: u64,
    pub dist_to_ref: Option<f64>,
}

pub const ADMM_COLUMNS: [&str; 9] = [
    "k",
    "primal_res",
    "dual_res",
    "local_solves",
    "local_newton",
    "failed_local",
    "comm_global",
    "comm_neighbor",
    "dist_to_ref",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdmmTrace {
    pub records: Vec<AdmmRecord>,
}

impl AdmmTrace {
    pub fn to_csv(&self) -> String {
        let mut out = ADMM_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{},{},{},{},{},{}",
                r.k,
                r.primal_res,
                r.dual_res,
                r.local_solves,
                r.local_newton,
                r.failed_local,
                r.comm_global,
                r.comm_neighbor,
                r.dist_to_ref.map_or_else(|| "n/a".into(), |d| format!("{d:e}")),
            );
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmmStatus {
    Converged,
    MaxIter,
}

impl AdmmStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::MaxIter => "max_iter",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdmmResult {
    pub x: Vec<DVector<f64>>,
    /// Consensus multiplier estimate `rho * u`.
    pub lambda: DVector<f64>,
    pub status: AdmmStatus,
    pub trace: AdmmTrace,
    pub comm: CommStats,
    pub local_solves: usize,
    pub failed_local_solves: usize,
}

impl AdmmResult {
    pub fn stacked_x(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.x.iter().map(|x| x.len()).sum(),
            self.x.iter().flat_map(|x| x.iter().copied()),
        )
    }

    pub fn iterations(&self) -> usize {
        self.trace.records.len()
    }
}

struct LocalSolve {
    x: DVector<f64>,
    newton: usize,
}

fn solve_local(
    sub: &Subsystem,
    rows: &DMatrix<f64>,
    target: DVector<f64>,
    warm: &DVector<f64>,
    config: &AdmmConfig,
) -> Option<LocalSolve> {
    let model = AugmentedModel {
        sub: sub.clone(),
        rows: rows.clone(),
        target,
        rho: config.rho,
    };
    let n = sub.dim();
    let local = Subsystem::new(Arc::new(model), CouplingMatrix::zeros(0, n)).with_initial_x(warm.clone());
    let problem = PartitionedProblem::new(vec![local], DVector::zeros(0)).ok()?;
    let result = dip_solve(&problem, &initial_point(&problem, &config.local), &config.local).ok()?;
    (result.status == OuterStatus::Converged).then(|| LocalSolve {
        x: result.point.parts[0].x.clone(),
        newton: result.outer_iterations(),
    })
}

/// Exchange-form ADMM over the consensus rows: each row's owners share the
/// row residual through neighbor averaging and a scaled dual `u`.
pub fn admm_solve(
    problem: &PartitionedProblem,
    config: &AdmmConfig,
    reference: Option<&DVector<f64>>,
) -> Result<AdmmResult> {
    config.validate()?;
    let layout = Layout::new(problem);
    let proj = &layout.projections;
    let mut net = layout.network()?;
    let subs = problem.subsystems();
    let blocks: Vec<DMatrix<f64>> = subs.iter().map(|s| s.coupling().support_block()).collect();

    let share = |i: usize, w: &DVector<f64>| {
        DVector::from_iterator(
            w.len(),
            proj.sets[i]
                .iter()
                .zip(&layout.owners[i])
                .zip(w.iter())
                .map(|((&r, &o), &a)| a - problem.b()[r] / o as f64),
        )
    };
    let averaged = |row_sums: Vec<DVector<f64>>| -> Vec<DVector<f64>> {
        row_sums
            .into_iter()
            .zip(&proj.averaging)
            .map(|(r, w)| r.component_div(w))
            .collect()
    };

    let mut x: Vec<DVector<f64>> = subs.iter().map(Subsystem::start_x).collect();
    let mut w: Vec<DVector<f64>> = blocks.iter().zip(&x).map(|(a, x)| a * x).collect();
    let local: Vec<DVector<f64>> = (0..subs.len()).map(|i| share(i, &w[i])).collect();
    let mut rbar = averaged(proj.neighbor_sum(&mut net, Phase::AdmmAverage, &local)?);
    let mut u: Vec<DVector<f64>> = proj.sets.iter().map(|s| DVector::zeros(s.len())).collect();

    let mut trace = AdmmTrace::default();
    let (mut solves, mut failures) = (0, 0);
    let mut status = AdmmStatus::MaxIter;
    for k in 1..=config.max_iter {
        let mut newton = 0;
        let mut failed = 0;
        for i in 0..subs.len() {
            let target = &w[i] - &rbar[i] - &u[i];
            solves += 1;
            match solve_local(&subs[i], &blocks[i], target, &x[i], config) {
                Some(sol) => {
                    newton += sol.newton;
                    x[i] = sol.x;
                }
                None => failed += 1,
            }
        }
        failures += failed;
        let w_next: Vec<DVector<f64>> = blocks.iter().zip(&x).map(|(a, x)| a * x).collect();
        let local: Vec<DVector<f64>> = (0..subs.len()).map(|i| share(i, &w_next[i])).collect();
        let row_sums = proj.neighbor_sum(&mut net, Phase::AdmmAverage, &local)?;
        let primal_local: Vec<f64> = row_sums.iter().map(|r| r.amax()).collect();
        let rbar_next = averaged(row_sums);
        let dual_local: Vec<f64> = (0..subs.len())
            .map(|i| ((&w_next[i] - &rbar_next[i]) - (&w[i] - &rbar[i])).amax() * config.rho)
            .collect();
        for (ui, ri) in u.iter_mut().zip(&rbar_next) {
            *ui += ri;
        }
        w = w_next;
        rbar = rbar_next;
        let primal = net.reduce_all(Phase::AdmmAverage, &primal_local, ReduceOp::Max)?;
        let dual = net.reduce_all(Phase::AdmmAverage, &dual_local, ReduceOp::Max)?;
        let total = net.stats().total();
        let stacked = DVector::from_iterator(
            x.iter().map(|x| x.len()).sum(),
            x.iter().flat_map(|x| x.iter().copied()),
        );
        trace.records.push(AdmmRecord {
            k,
            primal_res: primal,
            dual_res: dual,
            local_solves: subs.len(),
            local_newton: newton,
            failed_local: failed,
            comm_global: total.global_scalars,
            comm_neighbor: total.neighbor_scalars,
            dist_to_ref: reference.map(|r| (&stacked - r).amax()),
        });
        if primal <= config.tolerance && dual <= config.tolerance {
            status = AdmmStatus::Converged;
            break;
        }
    }
    let scaled: Vec<DVector<f64>> = u.iter().map(|u| u * config.rho).collect();
    Ok(AdmmResult {
        x,
        lambda: proj.assemble(&scaled),
        status,
        trace,
        comm: net.stats().clone(),
        local_solves: solves,
        failed_local_solves: failures,
    })
}
