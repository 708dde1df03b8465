use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use collision_barrier::bench::{self, exit_code, SolverKind};
use collision_barrier::scenario::load_scenario;
use collision_barrier::{Error, SolverSettings};

#[derive(Parser)]
#[command(name = "cbopt", about = "Collision-constrained pose and trajectory optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one scenario and write the trace CSV and result JSON.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "icb")]
        solver: String,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Run every scenario in a directory with several solvers and tabulate iterations to each ε.
    Sweep {
        dir: PathBuf,
        #[arg(long, default_value = "ecb,icb,ao", value_delimiter = ',')]
        solvers: Vec<String>,
        #[arg(long, default_value = "1e-1,1e-2,1e-3,1e-4", value_delimiter = ',')]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 50_000)]
        max_iters: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Load a scenario and audit the initial configuration.
    Check { scenario: PathBuf },
}

fn parse_solvers(names: &[String]) -> Result<Vec<SolverKind>, Error> {
    names.iter().map(|s| s.parse()).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { scenario, solver, eps, max_iters, out, deterministic } => {
            let outcome = (|| {
                let solver: SolverKind = solver.parse()?;
                let sc = load_scenario(&scenario)?;
                let mut settings = sc.settings.clone();
                if let Some(e) = eps {
                    settings.eps = e;
                }
                if let Some(m) = max_iters {
                    settings.max_iters = m;
                }
                if deterministic {
                    settings.deterministic = true;
                }
                let (result, csv) = bench::run(&sc, solver, &settings, &out)?;
                println!(
                    "{} {}: {:?} after {} iterations, |grad|inf = {:e} ({})",
                    sc.problem.name,
                    solver.name(),
                    result.trace.termination,
                    result.trace.records.len(),
                    result.trace.final_grad(),
                    csv.display()
                );
                Ok(result.trace.termination)
            })();
            if let Err(e) = &outcome {
                eprintln!("error: {e}");
            }
            exit_code(&outcome)
        }
        Command::Sweep { dir, solvers, eps, max_iters, out } => {
            let outcome = parse_solvers(&solvers).and_then(|solvers| {
                let base = SolverSettings { max_iters, deterministic: true, ..SolverSettings::default() };
                bench::sweep(&dir, &solvers, &eps, &base, &out)
            });
            match outcome {
                Ok((iters, secs)) => {
                    println!("iterations\n{iters}\nseconds\n{secs}");
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code(&Err(e))
                }
            }
        }
        Command::Check { scenario } => match load_scenario(&scenario).and_then(|sc| {
            let audit = sc.problem.audit(sc.initial.as_slice())?;
            let min = audit.iter().map(|a| a.2).fold(f64::INFINITY, f64::min);
            println!(
                "{}: {} dofs, {} objects, {} non-exempt pairs, min distance {:e}",
                sc.problem.name,
                sc.problem.dof(),
                sc.problem.objects.len(),
                audit.len(),
                min
            );
            Ok(())
        }) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                exit_code(&Err(e))
            }
        },
    };
    ExitCode::from(code as u8)
}
