use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dip_core::error::{Error, Result};
use dip_core::opf::Formulation;
use dip_core::runner::{self, exit_code_for_error, parse_override, ProblemSource, RunManifest, Settings, SolverKind};

#[derive(Parser)]
#[command(name = "dip", version, about = "Decentralized interior point batch runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormulationArg {
    Ac,
    Dc,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem with one or more solvers and write artifacts.
    Run {
        /// Built-in problem (qp_pair, bound_pair, random) or problem file.
        #[arg(long, conflicts_with_all = ["case", "partition"])]
        problem: Option<String>,
        /// Grid case: case2, case5, case118 or a MATPOWER file.
        #[arg(long)]
        case: Option<String>,
        /// Region assignment: single, a shipped name such as 2regions, or a file.
        #[arg(long, requires = "case", default_value = "single")]
        partition: String,
        #[arg(long, value_enum, default_value = "ac")]
        formulation: FormulationArg,
        /// Comma-separated solver list.
        #[arg(long, default_value = "dip")]
        solver: String,
        /// Option override; admm.* and oracle.* address those solvers.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Seed for randomly generated problems.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tabulate run summaries (files or run directories) of one problem.
    Compare {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run {
            problem,
            case,
            partition,
            formulation,
            solver,
            set,
            out,
            seed,
        } => {
            let solvers = SolverKind::parse_list(&solver)?;
            let overrides = set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
            // Report bad options even when the problem is missing.
            Settings::new(case.is_some(), &overrides)?;
            let source = match (problem, case) {
                (Some(p), None) => ProblemSource::Problem(p),
                (None, Some(case)) => ProblemSource::Opf {
                    case,
                    partition,
                    formulation: match formulation {
                        FormulationArg::Ac => Formulation::Ac,
                        FormulationArg::Dc => Formulation::Dc,
                    },
                },
                _ => return Err(Error::Usage("one of --problem or --case is required".into())),
            };
            let report = runner::run(&RunManifest {
                source,
                solvers,
                overrides,
                out_dir: out.clone(),
                seed,
            })?;
            for s in &report.summaries {
                let objective = s.objective.map_or_else(|| "n/a".into(), |v| format!("{v:.10e}"));
                println!(
                    "{:<7} {:<24} outer {:>4}  objective {}{}",
                    s.solver,
                    s.status,
                    s.outer_iterations,
                    objective,
                    s.message.as_deref().map(|m| format!("  ({m})")).unwrap_or_default()
                );
            }
            println!("artifacts in {}", out.display());
            Ok(report.exit_code)
        }
        Command::Compare { paths } => {
            let summaries = runner::load_summaries(&paths)?;
            print!("{}", runner::compare(&summaries)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for_error(&e) as u8)
        }
    }
}
