//! Outer decentralized interior point loop.
//!
//! Each outer iteration: every agent factors its local KKT matrix once and
//! forms its projected Schur pair; d-CG solves for the consensus-multiplier
//! step; agents back-substitute their primal-dual steps, pick local
//! fraction-to-boundary stepsizes, and three scalar reductions agree on
//! `(alpha_p, alpha_d, delta)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dcg::{build_projections, dcg_solve, DcgOptions, ProjectionMap};
use crate::error::{Error, Result};
use crate::kkt::{
    assemble_local_kkt, compute_schur_contribution, eval_barrier_residual, factorize_local_kkt, recover_local_step,
    split_step, LocalFactorization, RegularizationSchedule, SchurContribution,
};
use crate::netsim::{CommStats, Network, Phase, ReduceOp};
use crate::problem::{
    build_topology, consensus_residual, CouplingTopology, LocalPoint, PartitionedProblem, PrimalDualPoint,
};

/// Floor for slack and multiplier components after a step.
pub const INTERIOR_FLOOR: f64 = 1e-16;

/// Smallest initial slack.
pub const INITIAL_SLACK_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Inner tolerance coefficient.
    pub c1: f64,
    /// Barrier scale.
    pub theta: f64,
    /// Barrier exponent offset.
    pub gamma: f64,
    /// Exponent of the fraction-to-boundary margin `tau = 1 - delta^beta`.
    pub beta: f64,
    /// Inexactness exponent of the inner tolerance `c1 delta^eta`.
    pub eta: f64,
    /// Outer tolerance on the barrier residual.
    pub epsilon: f64,
    pub delta0: f64,
    pub delta_min: f64,
    pub max_outer: usize,
    /// `None` means `10 * n_c`.
    pub max_inner: Option<usize>,
    pub regularization: RegularizationSchedule,
    /// Let the inner solver continue along directions of negative Schur
    /// curvature. Needed when local Lagrangian Hessians are indefinite at
    /// the solution even though the coupled problem is regular.
    #[serde(default)]
    pub allow_indefinite: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            c1: 1.0,
            theta: 0.1,
            gamma: 0.01,
            beta: 2.0,
            eta: 1.01,
            epsilon: 1e-8,
            delta0: 0.1,
            delta_min: 1e-12,
            max_outer: 100,
            max_inner: None,
            regularization: RegularizationSchedule::default(),
            allow_indefinite: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c1", self.c1),
            ("epsilon", self.epsilon),
            ("delta0", self.delta0),
            ("delta_min", self.delta_min),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} > 0 required, got {value}")));
            }
        }
        if !(self.eta > 1.0) {
            return Err(Error::Config(format!("η > 1 required, got {}", self.eta)));
        }
        if !(self.beta > self.gamma) {
            return Err(Error::Config(format!(
                "β > γ required, got β = {} and γ = {}",
                self.beta, self.gamma
            )));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("θ in (0, 1] required, got {}", self.theta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("γ >= 0 required, got {}", self.gamma)));
        }
        if self.max_inner == Some(0) {
            return Err(Error::Config("max_inner >= 1 required".into()));
        }
        let r = &self.regularization;
        if !(r.initial > 0.0 && r.factor > 1.0 && r.max >= r.initial && r.condition_limit > 1.0) {
            return Err(Error::Config(format!(
                "regularization ladder needs 0 < rho_initial <= rho_max and rho_factor > 1, got {r:?}"
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let float = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?} as a number")))
        };
        let count = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?} as a count")))
        };
        match key {
            "c1" => self.c1 = float()?,
            "theta" => self.theta = float()?,
            "gamma" => self.gamma = float()?,
            "beta" => self.beta = float()?,
            "eta" => self.eta = float()?,
            "epsilon" => self.epsilon = float()?,
            "delta0" => self.delta0 = float()?,
            "delta_min" => self.delta_min = float()?,
            "max_outer" => self.max_outer = count()?,
            "max_inner" => self.max_inner = Some(count()?),
            "rho_initial" => self.regularization.initial = float()?,
            "rho_factor" => self.regularization.factor = float()?,
            "rho_max" => self.regularization.max = float()?,
            "condition_limit" => self.regularization.condition_limit = float()?,
            "allow_indefinite" => {
                self.allow_indefinite = value
                    .parse::<bool>()
                    .map_err(|_| Error::Config(format!("{key}: expected true or false, found {value:?}")))?
            }
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    pub fn inner_tolerance(&self, delta: f64) -> f64 {
        self.c1 * delta.powf(self.eta)
    }

    pub fn max_inner_for(&self, n_c: usize) -> usize {
        self.max_inner.unwrap_or(10 * n_c.max(1))
    }
}

/// One outer iteration. Step fields are `None` on the final converged row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub kkt_inf: f64,
    pub consensus_inf: f64,
    pub delta: f64,
    pub alpha_p: Option<f64>,
    pub alpha_d: Option<f64>,
    pub inner_iters: Option<usize>,
    pub inner_res: Option<f64>,
    pub inner_tol: Option<f64>,
    /// Largest regularization applied by any subsystem.
    pub rho_reg: Option<f64>,
    /// Cumulative global scalars.
    pub comm_global: u64,
    /// Cumulative neighbor scalars.
    pub comm_neighbor: u64,
    pub dist_to_ref: Option<f64>,
}

pub const TRACE_COLUMNS: [&str; 12] = [
    "k",
    "kkt_inf",
    "consensus_inf",
    "delta",
    "alpha_p",
    "alpha_d",
    "inner_iters",
    "inner_res",
    "rho_reg",
    "comm_global",
    "comm_neighbor",
    "dist_to_ref",
];

fn opt_float(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:e}"))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = TRACE_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{},{},{},{},{},{},{},{}",
                r.k,
                r.kkt_inf,
                r.consensus_inf,
                r.delta,
                opt_float(r.alpha_p),
                opt_float(r.alpha_d),
                r.inner_iters.map_or_else(|| "n/a".into(), |n| n.to_string()),
                opt_float(r.inner_res),
                opt_float(r.rho_reg),
                r.comm_global,
                r.comm_neighbor,
                opt_float(r.dist_to_ref),
            );
        }
        out
    }

    pub fn total_inner_iterations(&self) -> usize {
        self.records.iter().filter_map(|r| r.inner_iters).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterStatus {
    Converged,
    MaxOuter,
    SubsystemFailure,
    InnerTruncatedStall,
}

impl OuterStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::MaxOuter => "max_outer",
            Self::SubsystemFailure => "subsystem_failure",
            Self::InnerTruncatedStall => "inner_truncated_stall",
        }
    }
}

#[derive(Clone, Debug)]
pub struct OuterResult {
    pub point: PrimalDualPoint,
    pub status: OuterStatus,
    pub trace: ConvergenceTrace,
    pub comm: CommStats,
    /// Barrier parameter at the returned point.
    pub delta: f64,
    /// Successful local factorizations, one per subsystem per step.
    pub factorizations: usize,
    /// Factorization attempts including regularization retries.
    pub factorization_attempts: usize,
    /// Set when a step had to be clipped back into the interior.
    pub clipped: bool,
    /// Failing subsystem when `status` is `SubsystemFailure`.
    pub failed_subsystem: Option<usize>,
}

impl OuterResult {
    pub fn outer_iterations(&self) -> usize {
        self.trace.records.iter().filter(|r| r.alpha_p.is_some()).count()
    }
}

/// Starting point: `x` from the subsystem (or zeros), slacks
/// `max(-h(x), 1e-2)`, `mu = delta0 / v`, zero equality and consensus
/// multipliers.
pub fn initial_point(problem: &PartitionedProblem, config: &SolverConfig) -> PrimalDualPoint {
    let delta0 = initial_delta(problem, config);
    let parts = problem
        .subsystems()
        .iter()
        .map(|s| {
            let x = s.start_x();
            let v = s.ineq(&x).map(|h| (-h).max(INITIAL_SLACK_FLOOR));
            let mu = v.map(|v| delta0 / v);
            LocalPoint {
                gamma: DVector::zeros(s.n_eq()),
                x,
                v,
                mu,
            }
        })
        .collect();
    PrimalDualPoint {
        parts,
        lambda: DVector::zeros(problem.n_consensus()),
    }
}

/// `delta0`, or `delta_min` when no subsystem has inequalities.
pub fn initial_delta(problem: &PartitionedProblem, config: &SolverConfig) -> f64 {
    if problem.dimensions().2 == 0 {
        config.delta_min
    } else {
        config.delta0
    }
}

/// Local barrier value `theta (v'mu / n_h)^(1 + gamma)`, zero without
/// inequalities.
pub fn local_barrier(v: &DVector<f64>, mu: &DVector<f64>, config: &SolverConfig) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let average = v.dot(mu) / v.len() as f64;
    config.theta * average.max(0.0).powf(1.0 + config.gamma)
}

/// Next barrier parameter: max of the local values, floored at `delta_min`.
pub fn barrier_update(parts: &[LocalPoint], config: &SolverConfig, net: &mut Network) -> Result<f64> {
    let local: Vec<f64> = parts.iter().map(|p| local_barrier(&p.v, &p.mu, config)).collect();
    let delta = net.reduce_all(Phase::DipOuter, &local, ReduceOp::Max)?;
    Ok(delta.max(config.delta_min))
}

/// Largest `alpha <= 1` with `tau * (-value / step)` over blocking
/// components.
pub fn step_to_boundary(values: &DVector<f64>, steps: &DVector<f64>, tau: f64) -> f64 {
    values
        .iter()
        .zip(steps.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| tau * (-v / d))
        .fold(1.0, f64::min)
}

pub fn margin(delta: f64, config: &SolverConfig) -> f64 {
    1.0 - delta.powf(config.beta)
}

/// Local `(alpha_p, alpha_d)` of one subsystem.
pub fn fraction_to_boundary(
    v: &DVector<f64>,
    dv: &DVector<f64>,
    mu: &DVector<f64>,
    dmu: &DVector<f64>,
    delta: f64,
    config: &SolverConfig,
) -> (f64, f64) {
    let tau = margin(delta, config);
    (step_to_boundary(v, dv, tau), step_to_boundary(mu, dmu, tau))
}

/// Steps `(x, v)` by `alpha_p` and `(gamma, mu, lambda)` by `alpha_d`.
/// Returns whether any slack or multiplier had to be clipped to the floor.
pub fn apply_update(
    point: &mut PrimalDualPoint,
    steps: &[LocalPoint],
    dlambda: &DVector<f64>,
    alpha_p: f64,
    alpha_d: f64,
) -> bool {
    let mut clipped = false;
    for (p, d) in point.parts.iter_mut().zip(steps) {
        p.x.axpy(alpha_p, &d.x, 1.0);
        p.v.axpy(alpha_p, &d.v, 1.0);
        p.gamma.axpy(alpha_d, &d.gamma, 1.0);
        p.mu.axpy(alpha_d, &d.mu, 1.0);
        for z in p.v.iter_mut().chain(p.mu.iter_mut()) {
            if !(*z > 0.0) {
                *z = INTERIOR_FLOOR;
                clipped = true;
            }
        }
    }
    point.lambda.axpy(alpha_d, dlambda, 1.0);
    clipped
}

/// Precomputed communication structure of a problem.
#[derive(Clone, Debug)]
pub struct Layout {
    pub topology: CouplingTopology,
    pub projections: ProjectionMap,
    /// Owner counts per row of each `C_i`.
    pub owners: Vec<Vec<usize>>,
}

impl Layout {
    pub fn new(problem: &PartitionedProblem) -> Self {
        let topology = build_topology(problem);
        let n_c = problem.n_consensus();
        let counts = topology.row_owner_counts(n_c);
        let owners = topology
            .consensus_sets
            .iter()
            .map(|set| set.iter().map(|&r| counts[r]).collect())
            .collect();
        let projections = build_projections(&topology, n_c);
        Self {
            topology,
            projections,
            owners,
        }
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(self.topology.neighbors.clone())
    }
}

/// Result of one Schur-reduced Newton solve.
#[derive(Clone, Debug)]
pub struct NewtonStep {
    pub steps: Vec<LocalPoint>,
    pub dlambda: DVector<f64>,
    pub inner_iterations: usize,
    pub inner_residual: f64,
    pub inner_tolerance: f64,
    pub truncated: bool,
    pub regularization: f64,
    pub factorization_attempts: usize,
    pub contributions: Vec<SchurContribution>,
}

/// Barrier residuals of all subsystems at `(p, delta)`.
pub fn barrier_residuals(
    problem: &PartitionedProblem,
    layout: &Layout,
    point: &PrimalDualPoint,
    delta: f64,
) -> Result<Vec<DVector<f64>>> {
    problem
        .subsystems()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let lam = layout.projections.restrict(i, &point.lambda);
            eval_barrier_residual(i, s, &point.parts[i], &lam, delta)
        })
        .collect()
}

/// Factorization, Schur assembly, inner solve and back-substitution for
/// the barrier system at `(p, delta)` with inner tolerance `tolerance`.
pub fn newton_step(
    problem: &PartitionedProblem,
    layout: &Layout,
    point: &PrimalDualPoint,
    residuals: &[DVector<f64>],
    tolerance: f64,
    config: &SolverConfig,
    net: &mut Network,
) -> Result<NewtonStep> {
    let mut factorizations: Vec<LocalFactorization> = Vec::with_capacity(problem.len());
    let mut contributions = Vec::with_capacity(problem.len());
    let mut attempts = 0;
    let mut regularization: f64 = 0.0;
    for (i, s) in problem.subsystems().iter().enumerate() {
        let kkt = assemble_local_kkt(i, s, &point.parts[i])?;
        let fact = factorize_local_kkt(&kkt, &config.regularization)?;
        attempts += fact.attempts;
        regularization = regularization.max(fact.regularization);
        contributions.push(compute_schur_contribution(
            i,
            s,
            &fact,
            &point.parts[i],
            &residuals[i],
            problem.b(),
            &layout.owners[i],
        ));
        factorizations.push(fact);
    }

    let proj = &layout.projections;
    let lambda0: Vec<DVector<f64>> = proj.sets.iter().map(|s| DVector::zeros(s.len())).collect();
    let max_inner = config.max_inner_for(problem.n_consensus());
    let options = DcgOptions {
        tolerance,
        max_inner,
        allow_negative_curvature: config.allow_indefinite,
    };
    let inner = dcg_solve(&contributions, &lambda0, proj, options, net)?;

    let steps = problem
        .subsystems()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let stacked = recover_local_step(&factorizations[i], &residuals[i], s.coupling(), &inner.lambda[i]);
            split_step(s, &stacked)
        })
        .collect();
    Ok(NewtonStep {
        steps,
        dlambda: proj.assemble(&inner.lambda),
        inner_iterations: inner.iterations,
        inner_residual: inner.residual,
        inner_tolerance: tolerance,
        truncated: inner.truncated,
        regularization,
        factorization_attempts: attempts,
        contributions,
    })
}

/// `||F^delta(p)||_inf` including the consensus rows: one neighbor round
/// to sum row contributions and one max-reduction.
pub fn termination_norm(
    problem: &PartitionedProblem,
    layout: &Layout,
    point: &PrimalDualPoint,
    residuals: &[DVector<f64>],
    net: &mut Network,
) -> Result<f64> {
    let proj = &layout.projections;
    let local: Vec<DVector<f64>> = problem
        .subsystems()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ax = s.coupling().mul_support(&point.parts[i].x);
            DVector::from_iterator(
                ax.len(),
                proj.sets[i]
                    .iter()
                    .zip(&layout.owners[i])
                    .zip(ax.iter())
                    .map(|((&r, &o), &a)| a - problem.b()[r] / o as f64),
            )
        })
        .collect();
    let rows = proj.neighbor_sum(net, Phase::DipTermination, &local)?;
    let values: Vec<f64> = residuals
        .iter()
        .zip(&rows)
        .map(|(f, r)| f.amax().max(r.amax()))
        .collect();
    net.reduce_all(Phase::DipTermination, &values, ReduceOp::Max)
}

/// What an observer sees after each Newton solve.
pub struct IterateView<'a> {
    pub k: usize,
    pub point: &'a PrimalDualPoint,
    pub delta: f64,
    pub step: &'a NewtonStep,
}

pub fn dip_solve(problem: &PartitionedProblem, start: &PrimalDualPoint, config: &SolverConfig) -> Result<OuterResult> {
    dip_solve_with(problem, start, config, None, &mut |_| {})
}

/// Runs the outer loop from `start`. `reference` adds distance-to-reference
/// to the trace; `observer` sees every Newton solve before the update.
pub fn dip_solve_with(
    problem: &PartitionedProblem,
    start: &PrimalDualPoint,
    config: &SolverConfig,
    reference: Option<&DVector<f64>>,
    observer: &mut dyn FnMut(&IterateView<'_>),
) -> Result<OuterResult> {
    config.validate()?;
    start.check_dimensions(problem)?;
    for (i, p) in start.parts.iter().enumerate() {
        p.check_interior(i)?;
    }
    if let Some(r) = reference {
        if r.len() != problem.dimensions().0 {
            return Err(Error::DimensionMismatch {
                context: "reference solution".into(),
                expected: problem.dimensions().0,
                found: r.len(),
            });
        }
    }

    let layout = Layout::new(problem);
    let mut net = layout.network()?;
    let mut point = start.clone();
    let mut delta = initial_delta(problem, config);
    let mut trace = ConvergenceTrace::default();
    let mut factorizations = 0;
    let mut attempts = 0;
    let mut clipped = false;
    let mut previous: Option<(bool, f64)> = None;

    let finish = |point, status, trace, net: Network, delta, factorizations, attempts, clipped, failed| OuterResult {
        point,
        status,
        trace,
        comm: net.stats().clone(),
        delta,
        factorizations,
        factorization_attempts: attempts,
        clipped,
        failed_subsystem: failed,
    };

    for k in 0.. {
        let residuals = barrier_residuals(problem, &layout, &point, delta)?;
        let kkt_inf = termination_norm(problem, &layout, &point, &residuals, &mut net)?;
        let mut record = TraceRecord {
            k,
            kkt_inf,
            consensus_inf: consensus_residual(problem, &point)?.amax(),
            delta,
            alpha_p: None,
            alpha_d: None,
            inner_iters: None,
            inner_res: None,
            inner_tol: None,
            rho_reg: None,
            comm_global: 0,
            comm_neighbor: 0,
            dist_to_ref: reference.map(|r| (point.stacked_x() - r).amax()),
        };
        let snapshot = |record: &mut TraceRecord, net: &Network| {
            let total = net.stats().total();
            record.comm_global = total.global_scalars;
            record.comm_neighbor = total.neighbor_scalars;
        };

        if kkt_inf <= config.epsilon && delta <= 10.0 * config.delta_min {
            snapshot(&mut record, &net);
            trace.push(record);
            return Ok(finish(
                point,
                OuterStatus::Converged,
                trace,
                net,
                delta,
                factorizations,
                attempts,
                clipped,
                None,
            ));
        }
        if k >= config.max_outer {
            snapshot(&mut record, &net);
            trace.push(record);
            return Ok(finish(
                point,
                OuterStatus::MaxOuter,
                trace,
                net,
                delta,
                factorizations,
                attempts,
                clipped,
                None,
            ));
        }

        let tolerance = config.inner_tolerance(delta);
        let step = match newton_step(problem, &layout, &point, &residuals, tolerance, config, &mut net) {
            Ok(step) => step,
            Err(Error::SubsystemFailure { subsystem, .. }) => {
                snapshot(&mut record, &net);
                trace.push(record);
                return Ok(finish(
                    point,
                    OuterStatus::SubsystemFailure,
                    trace,
                    net,
                    delta,
                    factorizations,
                    attempts,
                    clipped,
                    Some(subsystem),
                ));
            }
            Err(e) => return Err(e),
        };
        factorizations += problem.len();
        attempts += step.factorization_attempts;
        observer(&IterateView {
            k,
            point: &point,
            delta,
            step: &step,
        });

        let tau = margin(delta, config);
        let (local_p, local_d): (Vec<f64>, Vec<f64>) = point
            .parts
            .iter()
            .zip(&step.steps)
            .map(|(p, d)| (step_to_boundary(&p.v, &d.v, tau), step_to_boundary(&p.mu, &d.mu, tau)))
            .unzip();
        let alpha_p = net.reduce_all(Phase::DipOuter, &local_p, ReduceOp::Min)?;
        let alpha_d = net.reduce_all(Phase::DipOuter, &local_d, ReduceOp::Min)?;
        clipped |= apply_update(&mut point, &step.steps, &step.dlambda, alpha_p, alpha_d);
        delta = barrier_update(&point.parts, config, &mut net)?;

        record.alpha_p = Some(alpha_p);
        record.alpha_d = Some(alpha_d);
        record.inner_iters = Some(step.inner_iterations);
        record.inner_res = Some(step.inner_residual);
        record.inner_tol = Some(step.inner_tolerance);
        record.rho_reg = Some(step.regularization);
        snapshot(&mut record, &net);
        trace.push(record);

        if let Some((was_truncated, last_kkt)) = previous {
            if was_truncated && step.truncated && kkt_inf >= last_kkt {
                return Ok(finish(
                    point,
                    OuterStatus::InnerTruncatedStall,
                    trace,
                    net,
                    delta,
                    factorizations,
                    attempts,
                    clipped,
                    None,
                ));
            }
        }
        previous = Some((step.truncated, kkt_inf));
    }
    unreachable!()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// Number of trailing full-step iterations.
    pub tail_len: usize,
    /// `e_{k+1} / e_k` over the tail; a ratio whose numerator reached the
    /// error floor is reported as 0 and ends the list.
    pub ratios: Vec<f64>,
    pub collapsed: bool,
    pub in_local_regime: bool,
    pub superlinear: bool,
    pub message: String,
}

/// Default error floor: below this the distance to the reference is
/// dominated by the reference's own accuracy.
pub fn default_error_floor(reference: &DVector<f64>) -> f64 {
    1e-9 * reference.amax().max(1.0)
}

/// Error ratios over the trailing run of full steps.
pub fn rate_diagnostic(trace: &ConvergenceTrace, error_floor: f64) -> RateReport {
    let records = &trace.records;
    let full = |r: &TraceRecord| r.alpha_p == Some(1.0) && r.alpha_d == Some(1.0);
    let stepped = records.iter().rposition(|r| r.alpha_p.is_some());
    let Some(last) = stepped else {
        return RateReport::not_local("no steps taken");
    };
    let mut start = last + 1;
    while start > 0 && full(&records[start - 1]) {
        start -= 1;
    }
    let tail_len = last + 1 - start;
    if tail_len == 0 || last + 1 >= records.len() {
        return RateReport::not_local("not in local regime: no trailing full steps");
    }
    let errors: Option<Vec<f64>> = records[start..=last + 1].iter().map(|r| r.dist_to_ref).collect();
    let Some(errors) = errors else {
        return RateReport::not_local("no reference attached");
    };

    let mut ratios = Vec::new();
    let mut collapsed = false;
    for w in errors.windows(2) {
        if w[1] <= error_floor {
            ratios.push(0.0);
            collapsed = true;
            break;
        }
        ratios.push(w[1] / w[0]);
    }
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    let last_small = ratios.last().is_some_and(|&r| r < 0.5);
    let superlinear = decreasing && last_small && (ratios.len() >= 3 || collapsed);
    let message = if superlinear {
        "superlinear-consistent".to_string()
    } else if !decreasing {
        "ratios not strictly decreasing".to_string()
    } else if !last_small {
        "final ratio not below 0.5".to_string()
    } else {
        "tail too short to judge".to_string()
    };
    RateReport {
        tail_len,
        ratios,
        collapsed,
        in_local_regime: true,
        superlinear,
        message,
    }
}

impl RateReport {
    fn not_local(message: &str) -> Self {
        Self {
            tail_len: 0,
            ratios: Vec::new(),
            collapsed: false,
            in_local_regime: false,
            superlinear: false,
            message: message.to_string(),
        }
    }
}

/// Dense assembled Schur matrix of one Newton solve.
pub fn assembled_schur(step: &NewtonStep, n_c: usize) -> DMatrix<f64> {
    crate::dcg::assemble_schur(&step.contributions, n_c).0
}
