//! Essentially decentralized conjugate gradients for the Schur system
//! `S dlambda = s`.
//!
//! Each agent stores only the consensus rows in its set `C_i`. Shared rows
//! are stored redundantly by every owner, and the averaging weights
//! `Lambda_i^-1` make the globally summed `eta` equal to the squared norm
//! of the assembled residual. Per iteration the method needs one neighbor
//! exchange of `u = S_i p_i` segments and two scalar sums (`sigma`, `eta`);
//! the stopping test adds one scalar max-reduction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kkt::SchurContribution;
use crate::netsim::{Message, Network, Phase, ReduceOp};
use crate::problem::CouplingTopology;

/// Shared consensus rows between agent `i` and one neighbor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub neighbor: usize,
    /// Positions of the shared rows in `C_i`, ordered by global row.
    pub local: Vec<usize>,
    /// Positions of the same rows in `C_neighbor`.
    pub remote: Vec<usize>,
}

/// Selection operators `I_{C_i}`, overlap maps `I_ij` and averaging
/// weights `Lambda_i` for every agent.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMap {
    pub n_c: usize,
    pub sets: Vec<Vec<usize>>,
    /// Diagonal of `Lambda_i`: number of owners of each row of `C_i`.
    pub averaging: Vec<DVector<f64>>,
    /// Overlaps with every neighbor other than the agent itself.
    pub overlaps: Vec<Vec<Overlap>>,
}

pub fn build_projections(topology: &CouplingTopology, n_c: usize) -> ProjectionMap {
    let counts = topology.row_owner_counts(n_c);
    let sets = topology.consensus_sets.clone();
    let averaging = sets
        .iter()
        .map(|set| DVector::from_iterator(set.len(), set.iter().map(|&r| counts[r] as f64)))
        .collect();
    let overlaps = sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            topology.neighbors[i]
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let other = &sets[j];
                    let (mut local, mut remote) = (Vec::new(), Vec::new());
                    for (a, r) in set.iter().enumerate() {
                        if let Ok(c) = other.binary_search(r) {
                            local.push(a);
                            remote.push(c);
                        }
                    }
                    Overlap {
                        neighbor: j,
                        local,
                        remote,
                    }
                })
                .collect()
        })
        .collect();
    ProjectionMap {
        n_c,
        sets,
        averaging,
        overlaps,
    }
}

impl ProjectionMap {
    pub fn n_agents(&self) -> usize {
        self.sets.len()
    }

    /// `I_{C_i}' y`.
    pub fn lift(&self, i: usize, local: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_c);
        for (a, &r) in self.sets[i].iter().enumerate() {
            out[r] = local[a];
        }
        out
    }

    /// `I_{C_i} y`.
    pub fn restrict(&self, i: usize, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.sets[i].len(), self.sets[i].iter().map(|&r| full[r]))
    }

    /// Assembles per-agent segments into one vector, taking each row from
    /// its first owner.
    pub fn assemble(&self, segments: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_c);
        let mut seen = vec![false; self.n_c];
        for (set, seg) in self.sets.iter().zip(segments) {
            for (a, &r) in set.iter().enumerate() {
                if !seen[r] {
                    out[r] = seg[a];
                    seen[r] = true;
                }
            }
        }
        out
    }

    /// Largest disagreement between owners of the same row.
    pub fn max_disagreement(&self, segments: &[DVector<f64>]) -> f64 {
        let reference = self.assemble(segments);
        self.sets
            .iter()
            .zip(segments)
            .flat_map(|(set, seg)| {
                let reference = &reference;
                set.iter().enumerate().map(move |(a, &r)| (seg[a] - reference[r]).abs())
            })
            .fold(0.0, f64::max)
    }

    fn check_consistent(&self, segments: &[DVector<f64>]) -> Result<()> {
        let reference = self.assemble(segments);
        for (set, seg) in self.sets.iter().zip(segments) {
            for (a, &r) in set.iter().enumerate() {
                if seg[a] != reference[r] {
                    return Err(Error::InconsistentMultipliers {
                        row: r,
                        first: reference[r],
                        second: seg[a],
                    });
                }
            }
        }
        Ok(())
    }

    /// `sum_{j in N_i} I_ij w_j` for every agent, using one neighbor round.
    pub(crate) fn neighbor_sum(
        &self,
        net: &mut Network,
        phase: Phase,
        local: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        let outboxes = self
            .overlaps
            .iter()
            .enumerate()
            .map(|(i, ovs)| {
                ovs.iter()
                    .filter(|ov| !ov.local.is_empty())
                    .map(|ov| Message {
                        from: i,
                        to: ov.neighbor,
                        payload: ov.local.iter().map(|&a| local[i][a]).collect(),
                    })
                    .collect()
            })
            .collect();
        let inboxes = net.neighbor_exchange(phase, outboxes)?;
        Ok(inboxes
            .into_iter()
            .enumerate()
            .map(|(i, inbox)| {
                let mut acc = local[i].clone();
                for m in inbox {
                    let ov = self.overlaps[i]
                        .iter()
                        .find(|ov| ov.neighbor == m.from)
                        .expect("message from a neighbor");
                    for (&a, &v) in ov.local.iter().zip(&m.payload) {
                        acc[a] += v;
                    }
                }
                acc
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcgAgent {
    pub lambda: DVector<f64>,
    pub r: DVector<f64>,
    pub p: DVector<f64>,
    pub u: DVector<f64>,
    pub sigma: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcgState {
    pub agents: Vec<DcgAgent>,
    pub sigma: f64,
    pub eta: f64,
    pub iteration: usize,
    /// Continue through `sigma < 0` instead of failing; only `sigma = 0`
    /// is then a breakdown.
    pub allow_negative_curvature: bool,
}

impl DcgState {
    pub fn lambdas(&self) -> Vec<DVector<f64>> {
        self.agents.iter().map(|a| a.lambda.clone()).collect()
    }

    pub fn residuals(&self) -> Vec<DVector<f64>> {
        self.agents.iter().map(|a| a.r.clone()).collect()
    }

    pub fn directions(&self) -> Vec<DVector<f64>> {
        self.agents.iter().map(|a| a.p.clone()).collect()
    }
}

fn weighted_norm_sq(r: &DVector<f64>, weights: &DVector<f64>) -> f64 {
    r.iter().zip(weights.iter()).map(|(x, w)| x * x / w).sum()
}

pub fn dcg_init(
    contributions: &[SchurContribution],
    lambda0: &[DVector<f64>],
    proj: &ProjectionMap,
    net: &mut Network,
) -> Result<DcgState> {
    proj.check_consistent(lambda0)?;
    let local: Vec<DVector<f64>> = contributions
        .iter()
        .zip(lambda0)
        .map(|(c, l)| &c.rhs_hat - &c.s_hat * l)
        .collect();
    let r = proj.neighbor_sum(net, Phase::DcgInit, &local)?;
    let etas: Vec<f64> = r
        .iter()
        .zip(&proj.averaging)
        .map(|(r, w)| weighted_norm_sq(r, w))
        .collect();
    let eta = net.reduce_all(Phase::DcgInit, &etas, ReduceOp::Sum)?;
    let agents = r
        .into_iter()
        .zip(etas)
        .zip(lambda0)
        .map(|((r, eta), l)| DcgAgent {
            lambda: l.clone(),
            p: r.clone(),
            u: DVector::zeros(r.len()),
            r,
            sigma: 0.0,
            eta,
        })
        .collect();
    Ok(DcgState {
        agents,
        sigma: 0.0,
        eta,
        iteration: 0,
        allow_negative_curvature: false,
    })
}

/// One sweep of the decentralized CG recursion.
pub fn dcg_iterate(
    state: &mut DcgState,
    contributions: &[SchurContribution],
    proj: &ProjectionMap,
    net: &mut Network,
) -> Result<()> {
    if state.eta == 0.0 {
        return Ok(());
    }
    for (agent, c) in state.agents.iter_mut().zip(contributions) {
        agent.u = &c.s_hat * &agent.p;
        agent.sigma = agent.p.dot(&agent.u);
    }
    let sigmas: Vec<f64> = state.agents.iter().map(|a| a.sigma).collect();
    let sigma = net.reduce_all(Phase::DcgIterate, &sigmas, ReduceOp::Sum)?;
    let admissible = if state.allow_negative_curvature {
        sigma.is_finite() && sigma != 0.0
    } else {
        sigma > 0.0
    };
    if !admissible {
        return Err(Error::NotPositiveDefinite { curvature: sigma });
    }
    state.sigma = sigma;
    let step = state.eta / sigma;

    let us: Vec<DVector<f64>> = state.agents.iter().map(|a| a.u.clone()).collect();
    let su = proj.neighbor_sum(net, Phase::DcgIterate, &us)?;
    for ((agent, su), w) in state.agents.iter_mut().zip(su).zip(&proj.averaging) {
        agent.r.axpy(-step, &su, 1.0);
        agent.lambda.axpy(step, &agent.p, 1.0);
        agent.eta = weighted_norm_sq(&agent.r, w);
    }
    let etas: Vec<f64> = state.agents.iter().map(|a| a.eta).collect();
    let eta_next = net.reduce_all(Phase::DcgIterate, &etas, ReduceOp::Sum)?;
    let beta = eta_next / state.eta;
    for agent in &mut state.agents {
        agent.p = &agent.r + &agent.p * beta;
    }
    state.eta = eta_next;
    state.iteration += 1;
    Ok(())
}

/// Global `max_i ||r_i||_inf` via one max-reduction.
pub fn dcg_residual_norm(state: &DcgState, net: &mut Network) -> Result<f64> {
    let local: Vec<f64> = state.agents.iter().map(|a| a.r.amax()).collect();
    net.reduce_all(Phase::DcgTermination, &local, ReduceOp::Max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcgOutcome {
    /// Per-agent solution segments on `C_i`.
    pub lambda: Vec<DVector<f64>>,
    pub iterations: usize,
    /// Final `max_i ||r_i||_inf`.
    pub residual: f64,
    /// Residual norm before each iteration and after the last.
    pub history: Vec<f64>,
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcgOptions {
    pub tolerance: f64,
    pub max_inner: usize,
    pub allow_negative_curvature: bool,
}

impl DcgOptions {
    pub fn new(tolerance: f64, max_inner: usize) -> Self {
        Self {
            tolerance,
            max_inner,
            allow_negative_curvature: false,
        }
    }
}

/// Runs d-CG until `max_i ||r_i||_inf <= tolerance`, exact termination, or
/// `max_inner` iterations (reported as truncated).
pub fn dcg_solve(
    contributions: &[SchurContribution],
    lambda0: &[DVector<f64>],
    proj: &ProjectionMap,
    options: DcgOptions,
    net: &mut Network,
) -> Result<DcgOutcome> {
    let DcgOptions {
        tolerance, max_inner, ..
    } = options;
    let mut state = dcg_init(contributions, lambda0, proj, net)?;
    state.allow_negative_curvature = options.allow_negative_curvature;
    let mut history = Vec::new();
    loop {
        let residual = dcg_residual_norm(&state, net)?;
        history.push(residual);
        let done = residual <= tolerance || state.eta == 0.0;
        if done || state.iteration >= max_inner {
            return Ok(DcgOutcome {
                lambda: state.lambdas(),
                iterations: state.iteration,
                residual,
                history,
                truncated: !done,
            });
        }
        dcg_iterate(&mut state, contributions, proj, net)?;
    }
}

/// `S = sum_i I_{C_i}' S_i I_{C_i}` and `s` assembled centrally; used by
/// the reference solvers and diagnostics.
pub fn assemble_schur(contributions: &[SchurContribution], n_c: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut s = DMatrix::zeros(n_c, n_c);
    let mut rhs = DVector::zeros(n_c);
    for c in contributions {
        s += c.lifted_matrix(n_c);
        rhs += c.lifted_rhs(n_c);
    }
    (s, rhs)
}
