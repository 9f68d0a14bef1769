//! Synchronous message-passing fabric with communication accounting.
//!
//! Agents exchange data only through [`Network::neighbor_exchange`]
//! (vectors, restricted to the neighbor sets) and
//! [`Network::global_reduce`] (one scalar per agent, result broadcast to
//! all). Every call is one synchronous round. Messages an agent sends to
//! itself are delivered but not counted.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

/// Algorithm phase a communication round is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    DcgInit,
    DcgIterate,
    /// Max-reduction of local residual norms for the inner stopping test.
    DcgTermination,
    /// Step sizes and barrier parameter (three scalars per agent).
    DipOuter,
    /// Outer stopping test: consensus residual exchange and KKT-norm reduction.
    DipTermination,
    AdmmAverage,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::DcgInit,
        Phase::DcgIterate,
        Phase::DcgTermination,
        Phase::DipOuter,
        Phase::DipTermination,
        Phase::AdmmAverage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::DcgInit => "dcg_init",
            Phase::DcgIterate => "dcg_iterate",
            Phase::DcgTermination => "dcg_termination",
            Phase::DipOuter => "dip_outer",
            Phase::DipTermination => "dip_termination",
            Phase::AdmmAverage => "admm_average",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub neighbor_messages: u64,
    pub neighbor_scalars: u64,
    pub reductions: u64,
    pub global_scalars: u64,
}

impl Counters {
    fn add(&mut self, other: &Counters) {
        self.neighbor_messages += other.neighbor_messages;
        self.neighbor_scalars += other.neighbor_scalars;
        self.reductions += other.reductions;
        self.global_scalars += other.global_scalars;
    }
}

/// Per-agent and per-phase communication counters.
///
/// `per_phase` and `per_agent` count the same events, so both sum to
/// [`CommStats::total`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommStats {
    pub per_agent: Vec<Counters>,
    pub per_phase: BTreeMap<Phase, Counters>,
    /// Number of reduction rounds (each involving every agent).
    pub reduction_rounds: BTreeMap<Phase, u64>,
    /// Number of neighbor-exchange rounds.
    pub exchange_rounds: BTreeMap<Phase, u64>,
}

impl CommStats {
    pub fn new(n_agents: usize) -> Self {
        Self {
            per_agent: vec![Counters::default(); n_agents],
            ..Default::default()
        }
    }

    pub fn total(&self) -> Counters {
        let mut t = Counters::default();
        for c in &self.per_agent {
            t.add(c);
        }
        t
    }

    pub fn phase(&self, phase: Phase) -> Counters {
        self.per_phase.get(&phase).copied().unwrap_or_default()
    }

    pub fn reduction_rounds(&self, phase: Phase) -> u64 {
        self.reduction_rounds.get(&phase).copied().unwrap_or(0)
    }

    pub fn exchange_rounds(&self, phase: Phase) -> u64 {
        self.exchange_rounds.get(&phase).copied().unwrap_or(0)
    }

    /// Plain-text summary; column order is fixed.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let total = self.total();
        let _ = writeln!(out, "# communication summary");
        let _ = writeln!(
            out,
            "total neighbor_messages={} neighbor_scalars={} reductions={} global_scalars={}",
            total.neighbor_messages, total.neighbor_scalars, total.reductions, total.global_scalars
        );
        let _ = writeln!(out, "# per phase");
        let _ = writeln!(
            out,
            "phase,exchange_rounds,reduction_rounds,neighbor_messages,neighbor_scalars,reductions,global_scalars"
        );
        for phase in Phase::ALL {
            let c = self.phase(phase);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                phase,
                self.exchange_rounds(phase),
                self.reduction_rounds(phase),
                c.neighbor_messages,
                c.neighbor_scalars,
                c.reductions,
                c.global_scalars
            );
        }
        let _ = writeln!(out, "# per agent");
        let _ = writeln!(
            out,
            "agent,neighbor_messages,neighbor_scalars,reductions,global_scalars"
        );
        for (i, c) in self.per_agent.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                i, c.neighbor_messages, c.neighbor_scalars, c.reductions, c.global_scalars
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub payload: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

/// Communication graph plus accounting.
#[derive(Clone, Debug)]
pub struct Network {
    neighbors: Vec<Vec<usize>>,
    stats: CommStats,
}

impl Network {
    /// `neighbors[i]` must be sorted; adjacency must be symmetric.
    pub fn new(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, ns) in neighbors.iter().enumerate() {
            for &j in ns {
                if j >= n || neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::InvalidProblem(format!(
                        "asymmetric adjacency between agents {i} and {j}"
                    )));
                }
            }
        }
        Ok(Self {
            stats: CommStats::new(n),
            neighbors,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn stats(&self) -> &CommStats {
        &self.stats
    }

    pub fn take_stats(&mut self) -> CommStats {
        std::mem::replace(&mut self.stats, CommStats::new(self.neighbors.len()))
    }

    /// Delivers `outboxes[i]` (messages sent by agent `i`) at the round
    /// boundary. Returns one inbox per agent, ordered by sender.
    pub fn neighbor_exchange(&mut self, phase: Phase, outboxes: Vec<Vec<Message>>) -> Result<Vec<Vec<Message>>> {
        if outboxes.len() != self.n_agents() {
            return Err(Error::DimensionMismatch {
                context: "outboxes".into(),
                expected: self.n_agents(),
                found: outboxes.len(),
            });
        }
        for (i, outbox) in outboxes.iter().enumerate() {
            for m in outbox {
                if m.from != i || m.to >= self.n_agents() {
                    return Err(Error::TopologyViolation { from: i, to: m.to });
                }
                if m.to != i && self.neighbors[i].binary_search(&m.to).is_err() {
                    return Err(Error::TopologyViolation { from: i, to: m.to });
                }
            }
        }
        let mut inboxes: Vec<Vec<Message>> = vec![Vec::new(); self.n_agents()];
        let mut phase_counts = Counters::default();
        for outbox in outboxes {
            for m in outbox {
                if m.to != m.from {
                    let c = &mut self.stats.per_agent[m.from];
                    c.neighbor_messages += 1;
                    c.neighbor_scalars += m.payload.len() as u64;
                    phase_counts.neighbor_messages += 1;
                    phase_counts.neighbor_scalars += m.payload.len() as u64;
                }
                inboxes[m.to].push(m);
            }
        }
        self.stats.per_phase.entry(phase).or_default().add(&phase_counts);
        *self.stats.exchange_rounds.entry(phase).or_default() += 1;
        for inbox in &mut inboxes {
            inbox.sort_by_key(|m| m.from);
        }
        Ok(inboxes)
    }

    /// Combines one scalar per agent; the result is known to every agent.
    /// Folding happens in agent order, so the result is deterministic.
    pub fn global_reduce(&mut self, phase: Phase, contributions: &[Option<f64>], op: ReduceOp) -> Result<f64> {
        if contributions.len() != self.n_agents() {
            return Err(Error::MissingContribution {
                agent: contributions.len().min(self.n_agents()),
            });
        }
        if let Some(agent) = contributions.iter().position(Option::is_none) {
            return Err(Error::MissingContribution { agent });
        }
        let values = contributions.iter().map(|c| c.unwrap());
        let result = match op {
            ReduceOp::Sum => values.fold(0.0, |a, b| a + b),
            ReduceOp::Min => values.fold(f64::INFINITY, f64::min),
            ReduceOp::Max => values.fold(f64::NEG_INFINITY, f64::max),
        };
        for c in &mut self.stats.per_agent {
            c.reductions += 1;
            c.global_scalars += 1;
        }
        let n = self.n_agents() as u64;
        let entry = self.stats.per_phase.entry(phase).or_default();
        entry.reductions += n;
        entry.global_scalars += n;
        *self.stats.reduction_rounds.entry(phase).or_default() += 1;
        Ok(result)
    }

    /// Convenience for reductions where every agent contributes.
    pub fn reduce_all(&mut self, phase: Phase, values: &[f64], op: ReduceOp) -> Result<f64> {
        let c: Vec<Option<f64>> = values.iter().copied().map(Some).collect();
        self.global_reduce(phase, &c, op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Network {
        Network::new(vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]).unwrap()
    }

    #[test]
    fn delivers_and_counts_neighbor_message() {
        let mut net = chain();
        let out = vec![
            vec![],
            vec![Message {
                from: 1,
                to: 0,
                payload: vec![3.5],
            }],
            vec![],
        ];
        let inboxes = net.neighbor_exchange(Phase::DcgIterate, out).unwrap();
        assert_eq!(inboxes[0][0].payload, vec![3.5]);
        assert_eq!(net.stats().phase(Phase::DcgIterate).neighbor_scalars, 1);
        assert_eq!(net.stats().per_agent[1].neighbor_messages, 1);
    }

    #[test]
    fn non_neighbor_message_is_rejected() {
        let mut net = chain();
        let out = vec![
            vec![Message {
                from: 0,
                to: 2,
                payload: vec![1.0],
            }],
            vec![],
            vec![],
        ];
        let err = net.neighbor_exchange(Phase::DcgIterate, out).unwrap_err();
        assert!(matches!(err, Error::TopologyViolation { from: 0, to: 2 }));
        assert_eq!(net.stats().total(), Counters::default());
    }

    #[test]
    fn self_messages_are_free() {
        let mut net = chain();
        let out = vec![
            vec![Message {
                from: 0,
                to: 0,
                payload: vec![1.0, 2.0],
            }],
            vec![],
            vec![],
        ];
        let inboxes = net.neighbor_exchange(Phase::DcgIterate, out).unwrap();
        assert_eq!(inboxes[0].len(), 1);
        assert_eq!(net.stats().total().neighbor_scalars, 0);
    }

    #[test]
    fn reductions() {
        let mut net = Network::new(vec![vec![0, 1], vec![0, 1]]).unwrap();
        assert_eq!(
            net.reduce_all(Phase::DcgIterate, &[2.0, 2.0], ReduceOp::Sum).unwrap(),
            4.0
        );
        assert_eq!(
            net.reduce_all(Phase::DipOuter, &[1e-3, 1e-2], ReduceOp::Max).unwrap(),
            1e-2
        );
        assert_eq!(
            net.reduce_all(Phase::DipOuter, &[1e-3, 1e-2], ReduceOp::Min).unwrap(),
            1e-3
        );
        assert_eq!(net.stats().phase(Phase::DipOuter).global_scalars, 4);
        assert_eq!(net.stats().reduction_rounds(Phase::DipOuter), 2);
        let err = net
            .global_reduce(Phase::DipOuter, &[Some(1.0), None], ReduceOp::Sum)
            .unwrap_err();
        assert!(matches!(err, Error::MissingContribution { agent: 1 }));
    }

    #[test]
    fn asymmetric_adjacency_is_rejected() {
        assert!(Network::new(vec![vec![0, 1], vec![1]]).is_err());
    }

    #[test]
    fn per_phase_and_per_agent_totals_agree() {
        let mut net = chain();
        net.reduce_all(Phase::DcgInit, &[1.0, 2.0, 3.0], ReduceOp::Sum).unwrap();
        let out = vec![
            vec![Message {
                from: 0,
                to: 1,
                payload: vec![1.0, 2.0],
            }],
            vec![Message {
                from: 1,
                to: 2,
                payload: vec![1.0],
            }],
            vec![],
        ];
        net.neighbor_exchange(Phase::DcgInit, out).unwrap();
        let by_phase: u64 = net
            .stats()
            .per_phase
            .values()
            .map(|c| c.neighbor_scalars + c.global_scalars)
            .sum();
        let total = net.stats().total();
        assert_eq!(by_phase, total.neighbor_scalars + total.global_scalars);
        assert!(net.stats().summary().contains("dcg_init,1,1,2,3,3,3"));
    }
}
