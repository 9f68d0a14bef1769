//! Batch runs: problem loading, solver dispatch, artifacts and comparison
//! tables.
//!
//! A run writes, per solver, `<solver>_trace.csv`, `<solver>_comm.txt` and
//! `<solver>_summary.json` into the output directory, plus
//! `oracle_solution.json` when the oracle ran and `comparison.txt` when more
//! than one solver ran. Traces contain no timing data, so identical
//! manifests produce identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::{admm_solve, centralized_ip_solve_traced, oracle_config, AdmmConfig, AdmmStatus};
use crate::dip::{dip_solve_with, initial_point, OuterStatus, SolverConfig};
use crate::error::{Error, Result};
use crate::format::ProblemFile;
use crate::opf::{self, Formulation};
use crate::problem::PartitionedProblem;
use crate::problems;

pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MAX_ITER: i32 = 3;
pub const EXIT_SUBSYSTEM_FAILURE: i32 = 4;
pub const EXIT_STALL: i32 = 5;
pub const EXIT_ORACLE_FAILURE: i32 = 6;
pub const EXIT_INDEFINITE: i32 = 7;
pub const EXIT_NUMERICAL: i32 = 8;

pub fn exit_code_for_error(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Usage(_) | Error::Config(_) | Error::Parse { .. } | Error::Json(_) | Error::InvalidProblem(_) => {
            EXIT_USAGE
        }
        Error::SubsystemFailure { .. } => EXIT_SUBSYSTEM_FAILURE,
        Error::OracleFailure { .. } => EXIT_ORACLE_FAILURE,
        Error::NotPositiveDefinite { .. } => EXIT_INDEFINITE,
        Error::DimensionMismatch { .. }
        | Error::NotInterior { .. }
        | Error::NonFinite { .. }
        | Error::InconsistentMultipliers { .. }
        | Error::TopologyViolation { .. }
        | Error::MissingContribution { .. } => EXIT_NUMERICAL,
    }
}

fn exit_code_for_outer(status: OuterStatus) -> i32 {
    match status {
        OuterStatus::Converged => EXIT_CONVERGED,
        OuterStatus::MaxOuter => EXIT_MAX_ITER,
        OuterStatus::SubsystemFailure => EXIT_SUBSYSTEM_FAILURE,
        OuterStatus::InnerTruncatedStall => EXIT_STALL,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SolverKind {
    Dip,
    Admm,
    Oracle,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dip => "dip",
            Self::Admm => "admm",
            Self::Oracle => "oracle",
        }
    }

    /// Comma-separated list such as `dip,admm,oracle`; duplicates are
    /// dropped, order is kept.
    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let kind = match name {
                "dip" => Self::Dip,
                "admm" => Self::Admm,
                "oracle" => Self::Oracle,
                _ => {
                    return Err(Error::Usage(format!(
                        "unknown solver {name:?} (expected dip, admm or oracle)"
                    )))
                }
            };
            if !out.contains(&kind) {
                out.push(kind);
            }
        }
        if out.is_empty() {
            return Err(Error::Usage("no solver selected".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProblemSource {
    /// Built-in problem name or path to a problem file.
    Problem(String),
    /// Grid case and partition, each a shipped name or a file path.
    Opf {
        case: String,
        partition: String,
        formulation: Formulation,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub source: ProblemSource,
    pub solvers: Vec<SolverKind>,
    /// `key=value` overrides. Plain keys set d-IP options, `admm.` and
    /// `oracle.` prefixes address the other solvers.
    pub overrides: Vec<(String, String)>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct LoadedProblem {
    pub problem: PartitionedProblem,
    /// Multiplies model objectives into reported objective values.
    pub objective_scale: f64,
    pub is_opf: bool,
}

pub fn load_problem(source: &ProblemSource, seed: u64) -> Result<LoadedProblem> {
    match source {
        ProblemSource::Problem(name) => {
            let problem = if problems::BUILTIN_NAMES.contains(&name.as_str()) {
                problems::builtin(name, seed)?
            } else if Path::new(name).exists() {
                ProblemFile::load(Path::new(name))?.build()?
            } else {
                return Err(Error::Usage(format!(
                    "unknown problem {name:?}: not a file and not one of {}",
                    problems::BUILTIN_NAMES.join(", ")
                )));
            };
            Ok(LoadedProblem {
                problem,
                objective_scale: 1.0,
                is_opf: false,
            })
        }
        ProblemSource::Opf {
            case,
            partition,
            formulation,
        } => {
            let case = opf::load_case(case)?;
            let partition = opf::load_partition(&case, partition)?;
            let built = opf::build_opf_subproblems(&case, &partition, *formulation)?;
            Ok(LoadedProblem {
                problem: built.problem,
                objective_scale: built.cost_scale,
                is_opf: true,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub dip: SolverConfig,
    pub admm: AdmmConfig,
    pub oracle: SolverConfig,
}

impl Settings {
    pub fn new(is_opf: bool, overrides: &[(String, String)]) -> Result<Self> {
        let mut s = Settings {
            dip: if is_opf {
                opf::solver_config()
            } else {
                SolverConfig::default()
            },
            admm: AdmmConfig::default(),
            oracle: oracle_config(),
        };
        if is_opf {
            // With unit penalty the copy angles absorb all transfers and
            // local generation drops to zero.
            s.admm.rho = 1e3;
            s.admm.local.allow_indefinite = true;
        }
        for (key, value) in overrides {
            if let Some(k) = key.strip_prefix("admm.") {
                s.admm.set(k, value)?;
            } else if let Some(k) = key.strip_prefix("oracle.") {
                s.oracle.set(k, value)?;
            } else {
                s.dip.set(key, value)?;
            }
        }
        s.dip.validate()?;
        s.admm.validate()?;
        s.oracle.validate()?;
        Ok(s)
    }
}

/// Parses `key=value`.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    match text.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Usage(format!("expected key=value, found {text:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub solver: String,
    pub problem: String,
    pub status: String,
    pub exit_code: i32,
    pub outer_iterations: usize,
    /// Total d-CG iterations.
    pub inner_iterations: Option<usize>,
    /// Local KKT factorizations (interior point solvers).
    pub factorizations: Option<usize>,
    /// Local NLP solves (ADMM).
    pub local_solves: Option<usize>,
    pub global_scalars: u64,
    pub neighbor_scalars: u64,
    pub objective: Option<f64>,
    pub consensus_inf: Option<f64>,
    pub dist_to_ref: Option<f64>,
    pub message: Option<String>,
}

impl RunSummary {
    fn failed(solver: SolverKind, problem: &str, e: &Error) -> Self {
        Self {
            solver: solver.name().into(),
            problem: problem.into(),
            status: "error".into(),
            exit_code: exit_code_for_error(e),
            outer_iterations: 0,
            inner_iterations: None,
            factorizations: None,
            local_solves: None,
            global_scalars: 0,
            neighbor_scalars: 0,
            objective: None,
            consensus_inf: None,
            dist_to_ref: None,
            message: Some(e.to_string()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub summaries: Vec<RunSummary>,
    /// First nonzero solver exit code in run order, else 0.
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
}

fn consensus_inf(problem: &PartitionedProblem, xs: &[DVector<f64>]) -> f64 {
    let mut r = -problem.b().clone();
    for (s, x) in problem.subsystems().iter().zip(xs) {
        r += s.coupling().mul(x);
    }
    r.amax()
}

fn write(files: &mut Vec<PathBuf>, dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    files.push(path);
    Ok(())
}

/// Runs the selected solvers and writes artifacts. Errors are returned for
/// problems with the manifest itself; solver failures are reported in the
/// summaries and the exit code.
pub fn run(manifest: &RunManifest) -> Result<RunReport> {
    let is_opf = matches!(manifest.source, ProblemSource::Opf { .. });
    let settings = Settings::new(is_opf, &manifest.overrides)?;
    let loaded = load_problem(&manifest.source, manifest.seed)?;
    fs::create_dir_all(&manifest.out_dir)?;
    let dir = manifest.out_dir.as_path();
    let problem = &loaded.problem;
    let fingerprint = problem.fingerprint();
    let scale = loaded.objective_scale;
    let mut files = Vec::new();
    let mut summaries = Vec::new();

    // The oracle runs first so the others can report distances to it.
    let mut order = manifest.solvers.clone();
    order.sort_by_key(|k| *k != SolverKind::Oracle);
    let mut reference: Option<DVector<f64>> = None;

    for kind in order {
        let summary = match kind {
            SolverKind::Oracle => match centralized_ip_solve_traced(problem, &settings.oracle) {
                Ok((solution, result)) => {
                    write(&mut files, dir, "oracle_solution.json", &solution.to_json()?)?;
                    write(&mut files, dir, "oracle_trace.csv", &result.trace.to_csv())?;
                    write(&mut files, dir, "oracle_comm.txt", &result.comm.summary())?;
                    let x = solution.stacked_x();
                    let parts = solution
                        .to_point()
                        .parts
                        .iter()
                        .map(|p| p.x.clone())
                        .collect::<Vec<_>>();
                    reference = Some(x);
                    RunSummary {
                        solver: kind.name().into(),
                        problem: fingerprint.clone(),
                        status: result.status.name().into(),
                        exit_code: EXIT_CONVERGED,
                        outer_iterations: result.outer_iterations(),
                        inner_iterations: None,
                        factorizations: Some(result.factorizations),
                        local_solves: None,
                        global_scalars: result.comm.total().global_scalars,
                        neighbor_scalars: result.comm.total().neighbor_scalars,
                        objective: Some(solution.objective * scale),
                        consensus_inf: Some(consensus_inf(problem, &parts)),
                        dist_to_ref: None,
                        message: None,
                    }
                }
                Err(e) => RunSummary::failed(kind, &fingerprint, &e),
            },
            SolverKind::Dip => {
                let start = initial_point(problem, &settings.dip);
                match dip_solve_with(problem, &start, &settings.dip, reference.as_ref(), &mut |_| {}) {
                    Ok(result) => {
                        write(&mut files, dir, "dip_trace.csv", &result.trace.to_csv())?;
                        write(&mut files, dir, "dip_comm.txt", &result.comm.summary())?;
                        let xs: Vec<_> = result.point.parts.iter().map(|p| p.x.clone()).collect();
                        RunSummary {
                            solver: kind.name().into(),
                            problem: fingerprint.clone(),
                            status: result.status.name().into(),
                            exit_code: exit_code_for_outer(result.status),
                            outer_iterations: result.outer_iterations(),
                            inner_iterations: Some(result.trace.total_inner_iterations()),
                            factorizations: Some(result.factorizations),
                            local_solves: None,
                            global_scalars: result.comm.total().global_scalars,
                            neighbor_scalars: result.comm.total().neighbor_scalars,
                            objective: Some(problem.total_objective(&result.point) * scale),
                            consensus_inf: Some(consensus_inf(problem, &xs)),
                            dist_to_ref: result.trace.records.last().and_then(|r| r.dist_to_ref),
                            message: None,
                        }
                    }
                    Err(e) => RunSummary::failed(kind, &fingerprint, &e),
                }
            }
            SolverKind::Admm => match admm_solve(problem, &settings.admm, reference.as_ref()) {
                Ok(result) => {
                    write(&mut files, dir, "admm_trace.csv", &result.trace.to_csv())?;
                    write(&mut files, dir, "admm_comm.txt", &result.comm.summary())?;
                    let objective: f64 = problem
                        .subsystems()
                        .iter()
                        .zip(&result.x)
                        .map(|(s, x)| s.objective(x))
                        .sum();
                    RunSummary {
                        solver: kind.name().into(),
                        problem: fingerprint.clone(),
                        status: result.status.name().into(),
                        exit_code: match result.status {
                            AdmmStatus::Converged => EXIT_CONVERGED,
                            AdmmStatus::MaxIter => EXIT_MAX_ITER,
                        },
                        outer_iterations: result.iterations(),
                        inner_iterations: None,
                        factorizations: None,
                        local_solves: Some(result.local_solves),
                        global_scalars: result.comm.total().global_scalars,
                        neighbor_scalars: result.comm.total().neighbor_scalars,
                        objective: Some(objective * scale),
                        consensus_inf: Some(consensus_inf(problem, &result.x)),
                        dist_to_ref: result.trace.records.last().and_then(|r| r.dist_to_ref),
                        message: None,
                    }
                }
                Err(e) => RunSummary::failed(kind, &fingerprint, &e),
            },
        };
        let json = serde_json::to_string_pretty(&summary)? + "\n";
        write(&mut files, dir, &format!("{}_summary.json", kind.name()), &json)?;
        summaries.push(summary);
    }

    // Report in the order requested.
    summaries.sort_by_key(|s| manifest.solvers.iter().position(|k| k.name() == s.solver));
    if summaries.len() > 1 {
        write(&mut files, dir, "comparison.txt", &compare(&summaries)?)?;
    }
    let exit_code = summaries
        .iter()
        .map(|s| s.exit_code)
        .find(|&c| c != EXIT_CONVERGED)
        .unwrap_or(EXIT_CONVERGED);
    Ok(RunReport {
        summaries,
        exit_code,
        files,
    })
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

fn opt_sci(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3e}"))
}

/// Side-by-side table of run summaries of the same problem.
pub fn compare(summaries: &[RunSummary]) -> Result<String> {
    if summaries.len() < 2 {
        return Err(Error::Usage(format!(
            "compare needs at least two runs, got {}",
            summaries.len()
        )));
    }
    let problem = &summaries[0].problem;
    if let Some(other) = summaries.iter().find(|s| &s.problem != problem) {
        return Err(Error::Usage(format!(
            "refusing to compare runs of different problems: {problem} and {}",
            other.problem
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "# problem {problem}");
    let header = [
        "solver",
        "status",
        "outer",
        "inner",
        "local_work",
        "global_scalars",
        "neighbor_scalars",
        "objective",
        "consensus_inf",
        "dist_to_ref",
    ];
    let rows: Vec<[String; 10]> = summaries
        .iter()
        .map(|s| {
            let work = match (s.factorizations, s.local_solves) {
                (Some(f), _) => format!("{f} factorizations"),
                (None, Some(n)) => format!("{n} nlp solves"),
                (None, None) => "n/a".into(),
            };
            [
                s.solver.clone(),
                s.status.clone(),
                s.outer_iterations.to_string(),
                opt(s.inner_iterations),
                work,
                s.global_scalars.to_string(),
                s.neighbor_scalars.to_string(),
                s.objective.map_or_else(|| "n/a".into(), |v| format!("{v:.10e}")),
                opt_sci(s.consensus_inf),
                opt_sci(s.dist_to_ref),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap())
        .collect();
    let line = |cells: &[&str]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(out, "{}", line(&header));
    for r in &rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        let _ = writeln!(out, "{}", line(&cells));
    }
    Ok(out)
}

/// Loads summaries from `*_summary.json` files or run directories.
pub fn load_summaries(paths: &[PathBuf]) -> Result<Vec<RunSummary>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with("_summary.json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| Ok(serde_json::from_str(&fs::read_to_string(f)?)?))
        .collect()
}
