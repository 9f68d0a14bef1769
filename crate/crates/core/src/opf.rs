//! Optimal power flow front end: grid case parsing, region partitions and
//! the partitioned AC (polar) or DC OPF problem.
//!
//! Case files use a subset of the MATPOWER `.m` layout: `mpc.baseMVA`,
//! `mpc.bus`, `mpc.gen`, `mpc.branch` and `mpc.gencost` (polynomial cost
//! model with at most three coefficients). Line charging, bus shunts, tap
//! ratios and flow limits are read but ignored; out-of-service generators
//! and branches are dropped.
//!
//! Each region owns its buses and holds copies of the foreign buses at the
//! far end of its tie lines. Consensus rows equate every copy with the
//! owner's variable (magnitude and angle for AC, angle for DC).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::baselines::{centralized_ip_solve, oracle_config};
use crate::dip::{dip_solve, initial_point, SolverConfig};
use crate::error::{Error, Result};
use crate::problem::{consensus_residual, CouplingMatrix, LocalModel, PartitionedProblem, PrimalDualPoint, Subsystem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: u8,
    /// Demand in MW and MVAr.
    pub pd: f64,
    pub qd: f64,
    pub vm: f64,
    /// Angle in degrees.
    pub va: f64,
    pub vmax: f64,
    pub vmin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub pg: f64,
    pub qg: f64,
    pub qmax: f64,
    pub qmin: f64,
    pub pmax: f64,
    pub pmin: f64,
    /// `(c2, c1, c0)` with cost `c2 P^2 + c1 P + c0`, `P` in MW.
    pub cost: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

impl Branch {
    /// Series admittance `(g, b)` with `g + jb = 1 / (r + jx)`.
    pub fn admittance(&self) -> (f64, f64) {
        let d = self.r * self.r + self.x * self.x;
        (self.r / d, -self.x / d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
    /// Index of the reference bus in `buses`.
    pub reference: usize,
}

struct Row {
    line: usize,
    values: Vec<f64>,
}

type Tables = (BTreeMap<String, f64>, BTreeMap<String, Vec<Row>>);

fn parse_tables(text: &str, source: &str) -> Result<Tables> {
    let err = |line: usize, message: String| Error::Parse {
        source_name: source.to_string(),
        line,
        message,
    };
    let mut scalars = BTreeMap::new();
    let mut tables: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    let mut open: Option<(String, usize)> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('%').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut rest = body;
        if open.is_none() {
            if let Some(def) = rest.strip_prefix("mpc.") {
                let (name, value) = def
                    .split_once('=')
                    .ok_or_else(|| err(line, format!("expected assignment, found {body:?}")))?;
                let name = name.trim().to_string();
                let value = value.trim();
                if let Some(after) = value.strip_prefix('[') {
                    tables.entry(name.clone()).or_default();
                    open = Some((name, line));
                    rest = after;
                } else {
                    let v = value.trim_end_matches(';').trim();
                    if let Ok(x) = v.parse::<f64>() {
                        scalars.insert(name, x);
                    }
                    continue;
                }
            } else {
                continue;
            }
        }
        let (name, _) = open.clone().expect("inside a table");
        let (content, closed) = match rest.split_once(']') {
            Some((c, _)) => (c, true),
            None => (rest, false),
        };
        for chunk in content.split(';') {
            let tokens: Vec<&str> = chunk
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .collect();
            if tokens.is_empty() {
                continue;
            }
            let values = tokens
                .iter()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| err(line, format!("mpc.{name}: cannot parse {t:?} as a number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            tables.get_mut(&name).unwrap().push(Row { line, values });
        }
        if closed {
            open = None;
        }
    }
    if let Some((name, line)) = open {
        return Err(err(line, format!("mpc.{name}: table not closed")));
    }
    Ok((scalars, tables))
}

impl GridCase {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            source_name: source.to_string(),
            line,
            message,
        };
        let (scalars, mut tables) = parse_tables(text, source)?;
        let base_mva = *scalars
            .get("baseMVA")
            .ok_or_else(|| err(0, "missing mpc.baseMVA".into()))?;
        if !(base_mva > 0.0) {
            return Err(err(0, format!("baseMVA must be positive, got {base_mva}")));
        }
        let mut take = |name: &str, min_cols: usize| -> Result<Vec<Row>> {
            let rows = tables
                .remove(name)
                .ok_or_else(|| err(0, format!("missing table mpc.{name}")))?;
            for r in &rows {
                if r.values.len() < min_cols {
                    return Err(err(
                        r.line,
                        format!(
                            "mpc.{name}: expected at least {min_cols} columns, found {}",
                            r.values.len()
                        ),
                    ));
                }
            }
            Ok(rows)
        };
        let bus_rows = take("bus", 13)?;
        let gen_rows = take("gen", 10)?;
        let branch_rows = take("branch", 11)?;
        let cost_rows = take("gencost", 4)?;
        if cost_rows.len() != gen_rows.len() {
            return Err(err(
                cost_rows.first().map_or(0, |r| r.line),
                format!(
                    "mpc.gencost has {} rows for {} generators",
                    cost_rows.len(),
                    gen_rows.len()
                ),
            ));
        }

        let mut buses = Vec::with_capacity(bus_rows.len());
        let mut index = BTreeMap::new();
        for r in &bus_rows {
            let v = &r.values;
            let bus = Bus {
                id: v[0] as usize,
                kind: v[1] as u8,
                pd: v[2],
                qd: v[3],
                vm: v[7],
                va: v[8],
                vmax: v[11],
                vmin: v[12],
            };
            if v[0] < 1.0 || v[0].fract() != 0.0 {
                return Err(err(r.line, format!("invalid bus number {}", v[0])));
            }
            if index.insert(bus.id, buses.len()).is_some() {
                return Err(err(r.line, format!("duplicate bus {}", bus.id)));
            }
            if !(bus.vmin <= bus.vmax) {
                return Err(err(
                    r.line,
                    format!("bus {}: Vmin {} > Vmax {}", bus.id, bus.vmin, bus.vmax),
                ));
            }
            buses.push(bus);
        }
        let refs: Vec<usize> = (0..buses.len()).filter(|&i| buses[i].kind == 3).collect();
        let reference = match refs.as_slice() {
            [one] => *one,
            [] => return Err(err(0, "no reference bus (type 3)".into())),
            _ => {
                let line = bus_rows[refs[1]].line;
                return Err(err(
                    line,
                    format!("{} reference buses, expected exactly one", refs.len()),
                ));
            }
        };
        let lookup = |id: f64, line: usize| -> Result<usize> {
            index
                .get(&(id as usize))
                .copied()
                .ok_or_else(|| err(line, format!("unknown bus {id}")))
        };

        let mut generators = Vec::new();
        for (r, c) in gen_rows.iter().zip(&cost_rows) {
            let v = &r.values;
            let bus = lookup(v[0], r.line)?;
            if c.values[0] != 2.0 {
                return Err(err(c.line, "only polynomial cost (model 2) is supported".into()));
            }
            let n = c.values[3] as usize;
            if n > 3 || c.values.len() < 4 + n {
                return Err(err(
                    c.line,
                    format!("polynomial cost with {n} coefficients not supported"),
                ));
            }
            let mut cost = [0.0; 3];
            for k in 0..n {
                cost[3 - n + k] = c.values[4 + k];
            }
            if v[7] <= 0.0 {
                continue;
            }
            let g = Generator {
                bus,
                pg: v[1],
                qg: v[2],
                qmax: v[3],
                qmin: v[4],
                pmax: v[8],
                pmin: v[9],
                cost,
            };
            if !(g.pmin <= g.pmax && g.qmin <= g.qmax) {
                return Err(err(r.line, "generator bounds out of order".into()));
            }
            generators.push(g);
        }

        let mut branches = Vec::new();
        for r in &branch_rows {
            let v = &r.values;
            let (from, to) = (lookup(v[0], r.line)?, lookup(v[1], r.line)?);
            if v[10] <= 0.0 {
                continue;
            }
            if from == to {
                return Err(err(r.line, "branch connects a bus to itself".into()));
            }
            if v[2] == 0.0 && v[3] == 0.0 {
                return Err(err(r.line, "branch with zero impedance".into()));
            }
            branches.push(Branch {
                from,
                to,
                r: v[2],
                x: v[3],
            });
        }

        let case = GridCase {
            name: source.to_string(),
            base_mva,
            buses,
            generators,
            branches,
            reference,
        };
        let all: Vec<usize> = (0..case.buses.len()).collect();
        if !case.is_connected(&all) {
            return Err(err(0, "network graph is not connected".into()));
        }
        Ok(case)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        Self::parse(&text, &name)
    }

    /// Whether `buses` induce a connected subgraph.
    pub fn is_connected(&self, buses: &[usize]) -> bool {
        let Some(&first) = buses.first() else {
            return true;
        };
        let members: BTreeSet<usize> = buses.iter().copied().collect();
        let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for br in &self.branches {
            if members.contains(&br.from) && members.contains(&br.to) {
                adj.entry(br.from).or_default().push(br.to);
                adj.entry(br.to).or_default().push(br.from);
            }
        }
        let mut seen = BTreeSet::from([first]);
        let mut stack = vec![first];
        while let Some(u) = stack.pop() {
            for &w in adj.get(&u).into_iter().flatten() {
                if seen.insert(w) {
                    stack.push(w);
                }
            }
        }
        seen.len() == members.len()
    }

    /// Bus admittance matrix `(G, B)` from series elements only.
    pub fn admittance(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.buses.len();
        let (mut g, mut b) = (DMatrix::zeros(n, n), DMatrix::zeros(n, n));
        for br in &self.branches {
            let (gs, bs) = br.admittance();
            for (m, y) in [(&mut g, gs), (&mut b, bs)] {
                m[(br.from, br.from)] += y;
                m[(br.to, br.to)] += y;
                m[(br.from, br.to)] -= y;
                m[(br.to, br.from)] -= y;
            }
        }
        (g, b)
    }
}

pub const BUILTIN_CASES: [&str; 3] = ["case2", "case5", "case118"];

fn builtin_case_text(name: &str) -> Option<&'static str> {
    match name {
        "case2" => Some(include_str!("../data/case2.m")),
        "case5" => Some(include_str!("../data/case5.m")),
        "case118" => Some(include_str!("../data/case118.m")),
        _ => None,
    }
}

fn builtin_partition_text(case: &str, partition: &str) -> Option<&'static str> {
    match (case, partition) {
        ("case2", "2regions") => Some(include_str!("../data/case2_2regions.txt")),
        ("case5", "2regions") => Some(include_str!("../data/case5_2regions.txt")),
        ("case118", "3regions") => Some(include_str!("../data/case118_3regions.txt")),
        _ => None,
    }
}

/// A shipped case by name, or a case file path.
pub fn load_case(name: &str) -> Result<GridCase> {
    match builtin_case_text(name) {
        Some(text) => GridCase::parse(text, name),
        None if Path::new(name).exists() => GridCase::load(Path::new(name)),
        None => Err(Error::Usage(format!(
            "unknown case {name:?}: not a file and not one of {}",
            BUILTIN_CASES.join(", ")
        ))),
    }
}

/// `single`, a shipped partition name for the case, or a partition file.
pub fn load_partition(case: &GridCase, name: &str) -> Result<RegionPartition> {
    if name == "single" {
        return Ok(RegionPartition::single(case));
    }
    if let Some(text) = builtin_partition_text(&case.name, name) {
        return RegionPartition::parse(text, case, name);
    }
    if Path::new(name).exists() {
        return RegionPartition::parse(&std::fs::read_to_string(name)?, case, name);
    }
    Err(Error::Usage(format!(
        "unknown partition {name:?} for case {}",
        case.name
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    /// Region index of each bus.
    pub region_of_bus: Vec<usize>,
    /// Labels from the partition file, sorted; region `r` has label `labels[r]`.
    pub labels: Vec<i64>,
}

impl RegionPartition {
    pub fn single(case: &GridCase) -> Self {
        Self {
            region_of_bus: vec![0; case.buses.len()],
            labels: vec![0],
        }
    }

    /// Lines `bus region`, optionally `gen k region` to pin generator `k`
    /// (1-based, in case order); `#` starts a comment.
    pub fn parse(text: &str, case: &GridCase, source: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            source_name: source.to_string(),
            line,
            message,
        };
        let index: BTreeMap<usize, usize> = case.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut assigned: Vec<Option<i64>> = vec![None; case.buses.len()];
        let mut pinned = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = body.split_whitespace().collect();
            match tokens.as_slice() {
                ["gen", k, r] => {
                    let k: usize = k.parse().map_err(|_| err(line, format!("bad generator index {k:?}")))?;
                    let r: i64 = r.parse().map_err(|_| err(line, format!("bad region {r:?}")))?;
                    if k == 0 || k > case.generators.len() {
                        return Err(err(line, format!("generator {k} out of range")));
                    }
                    pinned.push((line, k - 1, r));
                }
                [bus, r] => {
                    let id: usize = bus.parse().map_err(|_| err(line, format!("bad bus number {bus:?}")))?;
                    let r: i64 = r.parse().map_err(|_| err(line, format!("bad region {r:?}")))?;
                    let &i = index.get(&id).ok_or_else(|| err(line, format!("unknown bus {id}")))?;
                    if assigned[i].replace(r).is_some() {
                        return Err(err(line, format!("bus {id} assigned twice")));
                    }
                }
                _ => return Err(err(line, format!("expected `bus region`, found {body:?}"))),
            }
        }
        if let Some(i) = assigned.iter().position(Option::is_none) {
            return Err(err(0, format!("bus {} not assigned to a region", case.buses[i].id)));
        }
        let labels: Vec<i64> = assigned
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let region_of_bus = assigned
            .iter()
            .map(|r| labels.binary_search(&r.unwrap()).unwrap())
            .collect();
        let partition = Self { region_of_bus, labels };
        for (line, k, r) in pinned {
            let bus = case.generators[k].bus;
            if partition.labels[partition.region_of_bus[bus]] != r {
                return Err(err(
                    line,
                    format!(
                        "generator {} pinned to region {r} but its bus {} is in region {}",
                        k + 1,
                        case.buses[bus].id,
                        partition.labels[partition.region_of_bus[bus]]
                    ),
                ));
            }
        }
        for r in 0..partition.n_regions() {
            if !case.is_connected(&partition.buses_of(r)) {
                return Err(err(0, format!("region {} is not connected", partition.labels[r])));
            }
        }
        Ok(partition)
    }

    pub fn n_regions(&self) -> usize {
        self.labels.len()
    }

    pub fn buses_of(&self, region: usize) -> Vec<usize> {
        (0..self.region_of_bus.len())
            .filter(|&b| self.region_of_bus[b] == region)
            .collect()
    }

    /// Branches whose endpoints lie in different regions.
    pub fn tie_lines(&self, case: &GridCase) -> Vec<usize> {
        (0..case.branches.len())
            .filter(|&k| {
                let br = &case.branches[k];
                self.region_of_bus[br.from] != self.region_of_bus[br.to]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// Polar AC power flow.
    #[default]
    Ac,
    /// Linearized flows `(theta_a - theta_b) / x`, active power only.
    Dc,
}

#[derive(Clone, Debug)]
struct LocalBus {
    owned: bool,
    pd: f64,
    qd: f64,
    vmin: f64,
    vmax: f64,
    /// Reference magnitude and angle (radians) if this is the owned reference bus.
    reference: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
struct LocalGen {
    bus: usize,
    pmin: f64,
    pmax: f64,
    qmin: f64,
    qmax: f64,
    cost: [f64; 3],
}

#[derive(Clone, Debug)]
struct LocalBranch {
    a: usize,
    b: usize,
    g: f64,
    b_ser: f64,
    x: f64,
}

/// One region's OPF: variables `(vm, va, p, q)` for AC or `(va, p)` for
/// DC, each block in local bus or generator order.
#[derive(Clone, Debug)]
struct RegionModel {
    formulation: Formulation,
    base: f64,
    /// Costs are divided by this so that gradients are of order one.
    cost_scale: f64,
    buses: Vec<LocalBus>,
    gens: Vec<LocalGen>,
    branches: Vec<LocalBranch>,
    owned: Vec<usize>,
    ref_local: Option<usize>,
}

/// `(value, gradient, Hessian)` of the flow leaving `a` with respect to
/// `(vm_a, vm_b, theta)`.
type FlowTerm = (f64, Vector3<f64>, Matrix3<f64>);

fn polar_flows(vm_a: f64, vm_b: f64, theta: f64, g: f64, b: f64) -> (FlowTerm, FlowTerm) {
    let (s, c) = theta.sin_cos();
    let k = g * c + b * s;
    let l = g * s - b * c;
    let p = (
        vm_a * vm_a * g - vm_a * vm_b * k,
        Vector3::new(2.0 * vm_a * g - vm_b * k, -vm_a * k, vm_a * vm_b * l),
        Matrix3::new(
            2.0 * g,
            -k,
            vm_b * l,
            -k,
            0.0,
            vm_a * l,
            vm_b * l,
            vm_a * l,
            vm_a * vm_b * k,
        ),
    );
    let q = (
        -vm_a * vm_a * b - vm_a * vm_b * l,
        Vector3::new(-2.0 * vm_a * b - vm_b * l, -vm_a * l, -vm_a * vm_b * k),
        Matrix3::new(
            -2.0 * b,
            -l,
            -vm_b * k,
            -l,
            0.0,
            -vm_a * k,
            -vm_b * k,
            -vm_a * k,
            vm_a * vm_b * l,
        ),
    );
    (p, q)
}

impl RegionModel {
    fn nb(&self) -> usize {
        self.buses.len()
    }

    fn ng(&self) -> usize {
        self.gens.len()
    }

    fn vm(&self, i: usize) -> usize {
        i
    }

    fn va(&self, i: usize) -> usize {
        match self.formulation {
            Formulation::Ac => self.nb() + i,
            Formulation::Dc => i,
        }
    }

    fn p(&self, k: usize) -> usize {
        match self.formulation {
            Formulation::Ac => 2 * self.nb() + k,
            Formulation::Dc => self.nb() + k,
        }
    }

    fn q(&self, k: usize) -> usize {
        2 * self.nb() + self.ng() + k
    }

    fn per_bus_eq(&self) -> usize {
        match self.formulation {
            Formulation::Ac => 2,
            Formulation::Dc => 1,
        }
    }

    fn ref_eqs(&self) -> usize {
        match (self.ref_local, self.formulation) {
            (None, _) => 0,
            (Some(_), Formulation::Ac) => 2,
            (Some(_), Formulation::Dc) => 1,
        }
    }

    /// Row of the active balance of owned bus `i`; reactive follows.
    fn balance_row(&self) -> Vec<Option<usize>> {
        let mut rows = vec![None; self.nb()];
        for (n, &i) in self.owned.iter().enumerate() {
            rows[i] = Some(n * self.per_bus_eq());
        }
        rows
    }

    /// Visits every flow term leaving an owned bus: `(row_p, a, b, branch)`.
    fn for_each_flow(&self, mut f: impl FnMut(usize, usize, usize, &LocalBranch)) {
        let rows = self.balance_row();
        for br in &self.branches {
            for (from, to) in [(br.a, br.b), (br.b, br.a)] {
                if let Some(row) = rows[from] {
                    f(row, from, to, br);
                }
            }
        }
    }

    fn ineq_rows(&self) -> usize {
        let gens = match self.formulation {
            Formulation::Ac => 4,
            Formulation::Dc => 2,
        };
        let buses = match self.formulation {
            Formulation::Ac => 2 * self.nb(),
            Formulation::Dc => 0,
        };
        buses + gens * self.ng()
    }

    fn cost_weight(&self, k: usize) -> (f64, f64, f64) {
        let [c2, c1, c0] = self.gens[k].cost;
        let s = self.cost_scale;
        (c2 * self.base * self.base / s, c1 * self.base / s, c0 / s)
    }
}

impl LocalModel for RegionModel {
    fn dim(&self) -> usize {
        match self.formulation {
            Formulation::Ac => 2 * self.nb() + 2 * self.ng(),
            Formulation::Dc => self.nb() + self.ng(),
        }
    }

    fn n_eq(&self) -> usize {
        self.per_bus_eq() * self.owned.len() + self.ref_eqs()
    }

    fn n_ineq(&self) -> usize {
        self.ineq_rows()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        (0..self.ng())
            .map(|k| {
                let (a, b, c) = self.cost_weight(k);
                let p = x[self.p(k)];
                a * p * p + b * p + c
            })
            .sum()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for k in 0..self.ng() {
            let (a, b, _) = self.cost_weight(k);
            g[self.p(k)] = 2.0 * a * x[self.p(k)] + b;
        }
        g
    }

    fn eq(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_eq());
        let rows = self.balance_row();
        for (i, bus) in self.buses.iter().enumerate() {
            if let Some(r) = rows[i] {
                out[r] -= bus.pd;
                if self.formulation == Formulation::Ac {
                    out[r + 1] -= bus.qd;
                }
            }
        }
        for (k, gen) in self.gens.iter().enumerate() {
            let r = rows[gen.bus].expect("generator at owned bus");
            out[r] += x[self.p(k)];
            if self.formulation == Formulation::Ac {
                out[r + 1] += x[self.q(k)];
            }
        }
        self.for_each_flow(|r, a, b, br| match self.formulation {
            Formulation::Ac => {
                let theta = x[self.va(a)] - x[self.va(b)];
                let (p, q) = polar_flows(x[self.vm(a)], x[self.vm(b)], theta, br.g, br.b_ser);
                out[r] -= p.0;
                out[r + 1] -= q.0;
            }
            Formulation::Dc => {
                out[r] -= (x[self.va(a)] - x[self.va(b)]) / br.x;
            }
        });
        if let Some(i) = self.ref_local {
            let (vm_s, va_s) = self.buses[i].reference.unwrap();
            let r = self.per_bus_eq() * self.owned.len();
            out[r] = x[self.va(i)] - va_s;
            if self.formulation == Formulation::Ac {
                out[r + 1] = x[self.vm(i)] - vm_s;
            }
        }
        out
    }

    fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_ineq());
        if self.formulation == Formulation::Ac {
            for i in 0..self.nb() {
                let b = &self.buses[i];
                out.push(x[self.vm(i)] - b.vmax);
                out.push(b.vmin - x[self.vm(i)]);
            }
        }
        for (k, g) in self.gens.iter().enumerate() {
            out.push(x[self.p(k)] - g.pmax);
            out.push(g.pmin - x[self.p(k)]);
            if self.formulation == Formulation::Ac {
                out.push(x[self.q(k)] - g.qmax);
                out.push(g.qmin - x[self.q(k)]);
            }
        }
        DVector::from_vec(out)
    }

    fn eq_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.n_eq(), self.dim());
        let rows = self.balance_row();
        for (k, gen) in self.gens.iter().enumerate() {
            let r = rows[gen.bus].unwrap();
            j[(r, self.p(k))] += 1.0;
            if self.formulation == Formulation::Ac {
                j[(r + 1, self.q(k))] += 1.0;
            }
        }
        self.for_each_flow(|r, a, b, br| match self.formulation {
            Formulation::Ac => {
                let theta = x[self.va(a)] - x[self.va(b)];
                let (p, q) = polar_flows(x[self.vm(a)], x[self.vm(b)], theta, br.g, br.b_ser);
                for (row, grad) in [(r, p.1), (r + 1, q.1)] {
                    j[(row, self.vm(a))] -= grad[0];
                    j[(row, self.vm(b))] -= grad[1];
                    j[(row, self.va(a))] -= grad[2];
                    j[(row, self.va(b))] += grad[2];
                }
            }
            Formulation::Dc => {
                j[(r, self.va(a))] -= 1.0 / br.x;
                j[(r, self.va(b))] += 1.0 / br.x;
            }
        });
        if let Some(i) = self.ref_local {
            let r = self.per_bus_eq() * self.owned.len();
            j[(r, self.va(i))] = 1.0;
            if self.formulation == Formulation::Ac {
                j[(r + 1, self.vm(i))] = 1.0;
            }
        }
        Some(j)
    }

    fn ineq_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.n_ineq(), self.dim());
        let mut r = 0;
        if self.formulation == Formulation::Ac {
            for i in 0..self.nb() {
                j[(r, self.vm(i))] = 1.0;
                j[(r + 1, self.vm(i))] = -1.0;
                r += 2;
            }
        }
        for k in 0..self.ng() {
            j[(r, self.p(k))] = 1.0;
            j[(r + 1, self.p(k))] = -1.0;
            r += 2;
            if self.formulation == Formulation::Ac {
                j[(r, self.q(k))] = 1.0;
                j[(r + 1, self.q(k))] = -1.0;
                r += 2;
            }
        }
        Some(j)
    }

    fn lagrangian_hessian(&self, x: &DVector<f64>, gamma: &DVector<f64>, _mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for k in 0..self.ng() {
            let (a, _, _) = self.cost_weight(k);
            h[(self.p(k), self.p(k))] += 2.0 * a;
        }
        if self.formulation == Formulation::Ac {
            self.for_each_flow(|r, a, b, br| {
                let theta = x[self.va(a)] - x[self.va(b)];
                let (p, q) = polar_flows(x[self.vm(a)], x[self.vm(b)], theta, br.g, br.b_ser);
                let hess = p.2 * (-gamma[r]) + q.2 * (-gamma[r + 1]);
                // (vm_a, vm_b, theta) -> (vm_a, vm_b, va_a, va_b)
                let idx = [self.vm(a), self.vm(b), self.va(a), self.va(b)];
                let chain = |u: usize| -> [(usize, f64); 2] {
                    match u {
                        0 => [(0, 1.0), (0, 0.0)],
                        1 => [(1, 1.0), (1, 0.0)],
                        _ => [(2, 1.0), (3, -1.0)],
                    }
                };
                for u in 0..3 {
                    for w in 0..3 {
                        for &(iu, su) in &chain(u) {
                            for &(iw, sw) in &chain(w) {
                                if su != 0.0 && sw != 0.0 {
                                    h[(idx[iu], idx[iw])] += su * sw * hess[(u, w)];
                                }
                            }
                        }
                    }
                }
            });
        }
        Some(h)
    }
}

/// Where a region's local variables live in the global variable vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    /// Case bus indices: owned buses first (ascending), then copies.
    pub buses: Vec<usize>,
    pub n_owned: usize,
    /// Case generator indices.
    pub generators: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct OpfProblem {
    pub problem: PartitionedProblem,
    pub formulation: Formulation,
    pub layouts: Vec<RegionLayout>,
    pub n_buses: usize,
    pub n_generators: usize,
    /// Model objectives are generation cost divided by this.
    pub cost_scale: f64,
}

impl OpfProblem {
    /// Length of the global vector `(vm, va, p, q)` (AC) or `(va, p)` (DC).
    /// Generation cost of `point`, in case units.
    pub fn cost(&self, point: &PrimalDualPoint) -> f64 {
        self.problem.total_objective(point) * self.cost_scale
    }

    pub fn global_dim(&self) -> usize {
        match self.formulation {
            Formulation::Ac => 2 * (self.n_buses + self.n_generators),
            Formulation::Dc => self.n_buses + self.n_generators,
        }
    }

    /// Maps local variables to global positions, averaging copies.
    pub fn global_x(&self, parts: &[DVector<f64>]) -> DVector<f64> {
        let mut sum = DVector::zeros(self.global_dim());
        let mut count = DVector::<f64>::zeros(self.global_dim());
        let (nb, ng) = (self.n_buses, self.n_generators);
        for (layout, x) in self.layouts.iter().zip(parts) {
            let lb = layout.buses.len();
            let lg = layout.generators.len();
            let mut put = |global: usize, local: usize| {
                sum[global] += x[local];
                count[global] += 1.0;
            };
            match self.formulation {
                Formulation::Ac => {
                    for (i, &b) in layout.buses.iter().enumerate() {
                        put(b, i);
                        put(nb + b, lb + i);
                    }
                    for (k, &g) in layout.generators.iter().enumerate() {
                        put(2 * nb + g, 2 * lb + k);
                        put(2 * nb + ng + g, 2 * lb + lg + k);
                    }
                }
                Formulation::Dc => {
                    for (i, &b) in layout.buses.iter().enumerate() {
                        put(b, i);
                    }
                    for (k, &g) in layout.generators.iter().enumerate() {
                        put(nb + g, lb + k);
                    }
                }
            }
        }
        sum.component_div(&count)
    }
}

/// Builds the partitioned OPF problem with the case's voltages and
/// dispatch (clamped into bounds) as starting point.
pub fn build_opf_subproblems(
    case: &GridCase,
    partition: &RegionPartition,
    formulation: Formulation,
) -> Result<OpfProblem> {
    if partition.region_of_bus.len() != case.buses.len() {
        return Err(Error::DimensionMismatch {
            context: "partition bus count".into(),
            expected: case.buses.len(),
            found: partition.region_of_bus.len(),
        });
    }
    let base = case.base_mva;
    let cost_scale = cost_scale(case);
    let n_regions = partition.n_regions();
    let region = &partition.region_of_bus;

    let mut layouts = Vec::with_capacity(n_regions);
    for r in 0..n_regions {
        let owned = partition.buses_of(r);
        let mut copies = BTreeSet::new();
        for br in &case.branches {
            if region[br.from] == r && region[br.to] != r {
                copies.insert(br.to);
            }
            if region[br.to] == r && region[br.from] != r {
                copies.insert(br.from);
            }
        }
        let mut buses = owned.clone();
        buses.extend(copies);
        let generators = (0..case.generators.len())
            .filter(|&k| region[case.generators[k].bus] == r)
            .collect();
        layouts.push(RegionLayout {
            buses,
            n_owned: owned.len(),
            generators,
        });
    }

    let per_copy = match formulation {
        Formulation::Ac => 2,
        Formulation::Dc => 1,
    };
    let mut triplets: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); n_regions];
    let mut n_c = 0;
    for (r, layout) in layouts.iter().enumerate() {
        let lb = layout.buses.len();
        for (i, &bus) in layout.buses.iter().enumerate().skip(layout.n_owned) {
            let s = region[bus];
            let owner = &layouts[s];
            let j = owner.buses[..owner.n_owned]
                .binary_search(&bus)
                .expect("owned by its region");
            let olb = owner.buses.len();
            match formulation {
                Formulation::Ac => {
                    triplets[r].push((n_c, i, 1.0));
                    triplets[s].push((n_c, j, -1.0));
                    triplets[r].push((n_c + 1, lb + i, 1.0));
                    triplets[s].push((n_c + 1, olb + j, -1.0));
                }
                Formulation::Dc => {
                    triplets[r].push((n_c, i, 1.0));
                    triplets[s].push((n_c, j, -1.0));
                }
            }
            n_c += per_copy;
        }
    }

    let mut subsystems = Vec::with_capacity(n_regions);
    for (r, layout) in layouts.iter().enumerate() {
        let local_of: BTreeMap<usize, usize> = layout.buses.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let buses = layout
            .buses
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let bus = &case.buses[b];
                let owned = i < layout.n_owned;
                LocalBus {
                    owned,
                    pd: bus.pd / base,
                    qd: bus.qd / base,
                    vmin: bus.vmin,
                    vmax: bus.vmax,
                    reference: (owned && b == case.reference).then(|| (bus.vm, bus.va.to_radians())),
                }
            })
            .collect::<Vec<_>>();
        let gens = layout
            .generators
            .iter()
            .map(|&k| {
                let g = &case.generators[k];
                LocalGen {
                    bus: local_of[&g.bus],
                    pmin: g.pmin / base,
                    pmax: g.pmax / base,
                    qmin: g.qmin / base,
                    qmax: g.qmax / base,
                    cost: g.cost,
                }
            })
            .collect::<Vec<_>>();
        let branches = case
            .branches
            .iter()
            .filter(|br| region[br.from] == r || region[br.to] == r)
            .map(|br| {
                let (g, b) = br.admittance();
                LocalBranch {
                    a: local_of[&br.from],
                    b: local_of[&br.to],
                    g,
                    b_ser: b,
                    x: br.x,
                }
            })
            .collect();
        let owned: Vec<usize> = (0..layout.n_owned).collect();
        let ref_local = buses.iter().position(|b| b.reference.is_some());
        let model = RegionModel {
            formulation,
            base,
            cost_scale,
            buses,
            gens,
            branches,
            owned,
            ref_local,
        };
        debug_assert!(model.buses.iter().take(layout.n_owned).all(|b| b.owned));

        let mut x0 = DVector::zeros(model.dim());
        for (i, &b) in layout.buses.iter().enumerate() {
            let bus = &case.buses[b];
            if formulation == Formulation::Ac {
                x0[model.vm(i)] = bus.vm.clamp(bus.vmin, bus.vmax);
            }
            x0[model.va(i)] = bus.va.to_radians();
        }
        for (k, &gk) in layout.generators.iter().enumerate() {
            let g = &case.generators[gk];
            x0[model.p(k)] = g.pg.clamp(g.pmin, g.pmax) / base;
            if formulation == Formulation::Ac {
                x0[model.q(k)] = g.qg.clamp(g.qmin, g.qmax) / base;
            }
        }
        let coupling = CouplingMatrix::from_triplets(n_c, model.dim(), &triplets[r])?;
        let name = format!("region {}", partition.labels[r]);
        subsystems.push(
            Subsystem::new(Arc::new(model), coupling)
                .with_name(name)
                .with_initial_x(x0),
        );
    }
    let problem = PartitionedProblem::new(subsystems, DVector::zeros(n_c))?.with_name(format!(
        "{}/{}regions/{}",
        case.name,
        n_regions,
        match formulation {
            Formulation::Ac => "ac",
            Formulation::Dc => "dc",
        }
    ));
    Ok(OpfProblem {
        problem,
        formulation,
        layouts,
        n_buses: case.buses.len(),
        n_generators: case.generators.len(),
        cost_scale,
    })
}

/// Largest marginal cost over the generators' ranges, per unit power.
fn cost_scale(case: &GridCase) -> f64 {
    let base = case.base_mva;
    case.generators
        .iter()
        .map(|g| {
            let [c2, c1, _] = g.cost;
            let p = g.pmax.abs().max(g.pmin.abs());
            (2.0 * c2 * p + c1).abs() * base
        })
        .fold(0.0, f64::max)
        .max(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpfComparison {
    pub available: bool,
    pub dip_status: String,
    pub f_dip: f64,
    pub f_star: Option<f64>,
    pub relative_objective_error: Option<f64>,
    pub x_error_inf: Option<f64>,
    pub consensus_inf: f64,
    pub outer_iterations: usize,
}

/// Solver settings for OPF instances: the default settings with negative
/// Schur curvature admitted, since the region Lagrangians are indefinite
/// along the duplicated boundary voltages.
pub fn solver_config() -> SolverConfig {
    SolverConfig {
        allow_indefinite: true,
        ..SolverConfig::default()
    }
}

/// Solves the partitioned problem with d-IP and the single-region problem
/// with the oracle, and compares objectives and averaged variables.
pub fn verify_against_oracle(
    case: &GridCase,
    partition: &RegionPartition,
    formulation: Formulation,
    config: &SolverConfig,
) -> Result<OpfComparison> {
    let opf = build_opf_subproblems(case, partition, formulation)?;
    let result = dip_solve(&opf.problem, &initial_point(&opf.problem, config), config)?;
    let f_dip = opf.cost(&result.point);
    let consensus_inf = consensus_residual(&opf.problem, &result.point)?.amax();
    let x_dip = opf.global_x(&xs(&result.point));

    let single = build_opf_subproblems(case, &RegionPartition::single(case), formulation)?;
    let oracle = centralized_ip_solve(&single.problem, &oracle_config()).ok();
    let (f_star, rel, x_err) = match &oracle {
        Some(o) => {
            let x_star = single.global_x(&[o.stacked_x()]);
            let f_star = o.objective * single.cost_scale;
            (
                Some(f_star),
                Some((f_dip - f_star).abs() / f_star.abs()),
                Some((&x_dip - &x_star).amax()),
            )
        }
        None => (None, None, None),
    };
    Ok(OpfComparison {
        available: oracle.is_some(),
        dip_status: result.status.name().into(),
        f_dip,
        f_star,
        relative_objective_error: rel,
        x_error_inf: x_err,
        consensus_inf,
        outer_iterations: result.outer_iterations(),
    })
}

fn xs(point: &PrimalDualPoint) -> Vec<DVector<f64>> {
    point.parts.iter().map(|p| p.x.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{forward_jacobian, validate_problem};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const TWO_BUS: &str = "mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
  2 1 0 0 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
  1 0 0 10 -10 1 100 1 10 0;
];
mpc.branch = [
  1 2 0 0.1 0 0 0 0 0 0 1;
];
mpc.gencost = [
  2 0 0 3 0.01 1 0;
];
";

    #[test]
    fn two_bus_admittance() {
        let case = GridCase::parse(TWO_BUS, "two").unwrap();
        let (g, b) = case.admittance();
        assert_eq!(g, DMatrix::zeros(2, 2));
        assert_relative_eq!(b[(0, 1)], 10.0, epsilon = 1e-12);
        assert_relative_eq!(b[(1, 0)], 10.0, epsilon = 1e-12);
        assert_relative_eq!(b[(0, 0)], -10.0, epsilon = 1e-12);
        assert_relative_eq!(b[(1, 1)], -10.0, epsilon = 1e-12);
    }

    #[test]
    fn parse_errors_carry_locations() {
        let no_ref = TWO_BUS.replace("1 3 0 0", "1 1 0 0");
        let e = GridCase::parse(&no_ref, "two").unwrap_err();
        assert!(e.to_string().contains("no reference bus"), "{e}");

        let bad = TWO_BUS.replace("2 1 0 0 0 0 1 1 0 230 1 1.1 0.9;", "2 1 0 x 0 0 1 1 0 230 1 1.1 0.9;");
        match GridCase::parse(&bad, "two").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("{e}"),
        }

        let island = TWO_BUS.replace("1 2 0 0.1 0 0 0 0 0 0 1;", "1 2 0 0.1 0 0 0 0 0 0 0;");
        assert!(GridCase::parse(&island, "two")
            .unwrap_err()
            .to_string()
            .contains("not connected"));

        let unordered = TWO_BUS.replace("1 1 0 230 1 1.1 0.9;\n  2", "1 1 0 230 1 0.8 0.9;\n  2");
        assert!(GridCase::parse(&unordered, "two").is_err());
    }

    #[test]
    fn shipped_cases_parse() {
        let c5 = load_case("case5").unwrap();
        assert_eq!((c5.buses.len(), c5.generators.len(), c5.branches.len()), (5, 5, 6));
        assert_eq!(c5.buses[c5.reference].id, 4);
        let c118 = load_case("case118").unwrap();
        assert_eq!(
            (c118.buses.len(), c118.generators.len(), c118.branches.len()),
            (118, 54, 186)
        );
        let (g, b) = c118.admittance();
        assert_eq!(g, g.transpose());
        assert_eq!(b, b.transpose());
        let p = load_partition(&c118, "3regions").unwrap();
        assert_eq!(p.n_regions(), 3);
        assert!(load_case("nope").is_err());
    }

    #[test]
    fn partition_checks() {
        let case = load_case("case5").unwrap();
        let p = load_partition(&case, "2regions").unwrap();
        assert_eq!(p.tie_lines(&case).len(), 3);
        assert!(RegionPartition::parse("1 1\n2 1\n3 1\n4 2\n", &case, "p").is_err());
        assert!(RegionPartition::parse("1 1\n2 2\n3 1\n4 2\n5 2\n", &case, "p")
            .unwrap_err()
            .to_string()
            .contains("not connected"));
        let pinned = "1 1\n2 1\n3 1\n4 2\n5 2\ngen 1 2\n";
        assert!(RegionPartition::parse(pinned, &case, "p").is_err());
        assert!(RegionPartition::parse("1 1\n2 1\n3 1\n4 2\n5 2\ngen 1 1\n", &case, "p").is_ok());
    }

    #[test]
    fn two_region_two_bus_has_four_consensus_rows() {
        let case = load_case("case2").unwrap();
        let p = load_partition(&case, "2regions").unwrap();
        let opf = build_opf_subproblems(&case, &p, Formulation::Ac).unwrap();
        assert_eq!(opf.problem.n_consensus(), 4);
        assert_eq!(opf.problem.b().amax(), 0.0);
        assert!(validate_problem(&opf.problem).is_ok());
        let single = build_opf_subproblems(&case, &RegionPartition::single(&case), Formulation::Ac).unwrap();
        assert_eq!(single.problem.n_consensus(), 0);
    }

    #[test]
    fn flat_start_zero_demand_residual_is_zero() {
        let case = load_case("case118").unwrap();
        let mut flat = case.clone();
        for b in &mut flat.buses {
            b.pd = 0.0;
            b.qd = 0.0;
        }
        let p = load_partition(&flat, "3regions").unwrap();
        let opf = build_opf_subproblems(&flat, &p, Formulation::Ac).unwrap();
        for (s, layout) in opf.problem.subsystems().iter().zip(&opf.layouts) {
            let lb = layout.buses.len();
            let x = DVector::from_fn(s.dim(), |i, _| if i < lb { 1.0 } else { 0.0 });
            let g = s.eq(&x);
            for r in 0..2 * layout.n_owned {
                assert_eq!(g[r], 0.0, "row {r}");
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let case = load_case("case5").unwrap();
        let p = load_partition(&case, "2regions").unwrap();
        for formulation in [Formulation::Ac, Formulation::Dc] {
            let opf = build_opf_subproblems(&case, &p, formulation).unwrap();
            for s in opf.problem.subsystems() {
                let mut x = s.start_x();
                for (i, v) in x.iter_mut().enumerate() {
                    *v += 0.01 * ((i * 7 % 5) as f64 - 2.0);
                }
                let m = s.model();
                let j = m.eq_jacobian(&x).unwrap();
                let fd = forward_jacobian(|y| m.eq(y), &x, s.n_eq());
                assert!((&j - &fd).amax() < 1e-4 * (1.0 + j.amax()), "{formulation:?}");
                let gamma = DVector::from_fn(s.n_eq(), |i, _| 0.3 + 0.1 * i as f64);
                let mu = DVector::zeros(s.n_ineq());
                let h = m.lagrangian_hessian(&x, &gamma, &mu).unwrap();
                let fdh = forward_jacobian(
                    |y| m.gradient(y) + m.eq_jacobian(y).unwrap().tr_mul(&gamma),
                    &x,
                    s.dim(),
                );
                assert!(
                    (&h - &fdh).amax() < 1e-4 * (1.0 + h.amax()),
                    "{formulation:?}\n{h}\n{fdh}"
                );
                assert_eq!(h, h.transpose());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn polar_flow_derivatives(vm_a in 0.8..1.2f64, vm_b in 0.8..1.2f64, th in -0.5..0.5f64, g in 0.0..5.0f64, b in -20.0..0.0f64) {
            let (p, q) = polar_flows(vm_a, vm_b, th, g, b);
            for (term, pick) in [(p, 0usize), (q, 1)] {
                let f = |z: &DVector<f64>| {
                    let (p, q) = polar_flows(z[0], z[1], z[2], g, b);
                    let t = if pick == 0 { p } else { q };
                    DVector::from_vec(vec![t.0, t.1[0], t.1[1], t.1[2]])
                };
                let z = DVector::from_vec(vec![vm_a, vm_b, th]);
                let jac = forward_jacobian(f, &z, 4);
                for k in 0..3 {
                    prop_assert!((jac[(0, k)] - term.1[k]).abs() < 1e-5 * (1.0 + term.1[k].abs()));
                    for l in 0..3 {
                        prop_assert!((jac[(1 + k, l)] - term.2[(k, l)]).abs() < 1e-5 * (1.0 + term.2[(k, l)].abs()));
                    }
                }
            }
        }
    }
}
