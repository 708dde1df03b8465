//! Running scenarios and writing traces, result files and comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::ao::ao_solve;
use crate::ecb::ecb_solve;
use crate::error::{Error, Result};
use crate::geometry::closest_points;
use crate::icb::icb_solve;
use crate::scenario::{load_scenario, Scenario};
use crate::solver::{SolveResult, SolveTrace, SolverSettings, TerminationReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Ecb,
    Icb,
    Ao,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Ecb, SolverKind::Icb, SolverKind::Ao];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Ecb => "ecb",
            SolverKind::Icb => "icb",
            SolverKind::Ao => "ao",
        }
    }

    pub fn solve(self, scenario: &Scenario, settings: &SolverSettings) -> Result<SolveResult> {
        match self {
            SolverKind::Ecb => ecb_solve(&scenario.problem, &scenario.initial, settings),
            SolverKind::Icb => icb_solve(&scenario.problem, &scenario.initial, settings),
            SolverKind::Ao => ao_solve(&scenario.problem, &scenario.initial, settings),
        }
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ecb" => Ok(SolverKind::Ecb),
            "icb" => Ok(SolverKind::Icb),
            "ao" => Ok(SolverKind::Ao),
            other => Err(Error::InvalidInput(format!("unknown solver {other}"))),
        }
    }
}

pub const CSV_HEADER: &str = "iter,objective,grad_inf_norm,alpha,active_pairs,elapsed_s";

/// Per-iteration CSV. Floats use the shortest round-trip representation.
pub fn trace_csv(trace: &SolveTrace) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &trace.records {
        let _ = writeln!(out, "{},{:e},{:e},{:e},{},{:e}", r.iter, r.objective, r.grad_inf_norm, r.step_alpha, r.pairs_active, r.elapsed_s);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct PlaneRecord {
    pub a: String,
    pub b: String,
    pub n: [f64; 3],
    pub d: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceRecord {
    pub a: String,
    pub b: String,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub solver: SolverKind,
    pub termination: TerminationReason,
    pub iterations: usize,
    pub final_objective: f64,
    pub final_grad_inf_norm: f64,
    pub theta: Vec<f64>,
    pub planes: Vec<PlaneRecord>,
    /// Every active pair's final distance.
    pub distances: Vec<DistanceRecord>,
}

pub fn report(scenario: &Scenario, solver: SolverKind, result: &SolveResult) -> Result<RunReport> {
    let p = &scenario.problem;
    let world = p.all_world_vertices(result.theta.as_slice())?;
    let name = |o: usize| p.objects[o].name.clone();
    let mut planes = Vec::new();
    let mut distances = Vec::new();
    for ps in result.pairs.iter() {
        if let Some(pl) = ps.plane {
            planes.push(PlaneRecord { a: name(ps.a), b: name(ps.b), n: [pl.n.x, pl.n.y, pl.n.z], d: pl.d });
        }
        let cp = closest_points(&world[ps.a], &world[ps.b])?;
        distances.push(DistanceRecord { a: name(ps.a), b: name(ps.b), distance: cp.distance });
    }
    let last = result.trace.records.last();
    Ok(RunReport {
        scenario: p.name.clone(),
        solver,
        termination: result.trace.termination,
        iterations: result.trace.records.len(),
        final_objective: last.map_or(f64::NAN, |r| r.objective),
        final_grad_inf_norm: last.map_or(f64::NAN, |r| r.grad_inf_norm),
        theta: result.theta.iter().copied().collect(),
        planes,
        distances,
    })
}

/// Solves and writes `<scenario>_<solver>.csv` and `<scenario>_<solver>.json` into `out_dir`.
pub fn run(scenario: &Scenario, solver: SolverKind, settings: &SolverSettings, out_dir: &Path) -> Result<(SolveResult, PathBuf)> {
    let result = solver.solve(scenario, settings)?;
    fs::create_dir_all(out_dir)?;
    let stem = format!("{}_{}", scenario.problem.name, solver.name());
    let csv_path = out_dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, trace_csv(&result.trace))?;
    let rep = report(scenario, solver, &result)?;
    let json = serde_json::to_string_pretty(&rep).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(out_dir.join(format!("{stem}.json")), json)?;
    Ok((result, csv_path))
}

/// Process exit code for a solve outcome.
pub fn exit_code(outcome: &Result<TerminationReason>) -> i32 {
    match outcome {
        Ok(TerminationReason::Converged) => 0,
        Ok(TerminationReason::Stalled) => 2,
        Ok(TerminationReason::MaxIters) => 3,
        Err(Error::InfeasibleStart(..)) => 4,
        Err(_) => 5,
    }
}

/// One cell row of a sweep: iterations and seconds to each ε, `None` when not reached.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub scenario: String,
    pub cells: Vec<(SolverKind, f64, Option<usize>, Option<f64>)>,
}

pub const NA: &str = "N.A.";

/// Runs every solver once to the smallest ε and reads off the first
/// iteration (and time) at which each ε was met.
pub fn sweep_scenario(scenario: &Scenario, solvers: &[SolverKind], eps_list: &[f64], base: &SolverSettings) -> Result<SweepRow> {
    let mut settings = base.clone();
    settings.eps = eps_list.iter().copied().fold(f64::INFINITY, f64::min);
    let mut cells = Vec::new();
    for &s in solvers {
        let res = s.solve(scenario, &settings)?;
        for &e in eps_list {
            cells.push((s, e, res.trace.iterations_to(e), res.trace.seconds_to(e)));
        }
    }
    Ok(SweepRow { scenario: scenario.problem.name.clone(), cells })
}

/// Iteration and seconds tables (rows = scenarios, columns = solver x ε).
pub fn sweep_tables(rows: &[SweepRow], solvers: &[SolverKind], eps_list: &[f64]) -> (String, String) {
    let mut header = String::from("scenario");
    for s in solvers {
        for e in eps_list {
            let _ = write!(header, ",{}@{:e}", s.name(), e);
        }
    }
    let mut iters = header.clone();
    let mut secs = header;
    iters.push('\n');
    secs.push('\n');
    for row in rows {
        iters.push_str(&row.scenario);
        secs.push_str(&row.scenario);
        for s in solvers {
            for e in eps_list {
                let cell = row.cells.iter().find(|c| c.0 == *s && c.1 == *e);
                match cell.and_then(|c| c.2) {
                    Some(i) => {
                        let _ = write!(iters, ",{i}");
                    }
                    None => {
                        let _ = write!(iters, ",{NA}");
                    }
                }
                match cell.and_then(|c| c.3) {
                    Some(t) => {
                        let _ = write!(secs, ",{t:.6}");
                    }
                    None => {
                        let _ = write!(secs, ",{NA}");
                    }
                }
            }
        }
        iters.push('\n');
        secs.push('\n');
    }
    (iters, secs)
}

/// Sweeps every `*.json` scenario in `dir` (sorted by file name) and writes
/// `iterations.csv` and `seconds.csv` into `out_dir`.
pub fn sweep(dir: &Path, solvers: &[SolverKind], eps_list: &[f64], base: &SolverSettings, out_dir: &Path) -> Result<(String, String)> {
    let mut files: Vec<PathBuf> =
        fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no scenario files in {}", dir.display())));
    }
    let mut rows = Vec::new();
    for f in &files {
        let sc = load_scenario(f)?;
        let mut settings = sc.settings.clone();
        settings.max_iters = base.max_iters;
        settings.deterministic = base.deterministic;
        rows.push(sweep_scenario(&sc, solvers, eps_list, &settings)?);
    }
    let (iters, secs) = sweep_tables(&rows, solvers, eps_list);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("iterations.csv"), &iters)?;
    fs::write(out_dir.join("seconds.csv"), &secs)?;
    Ok((iters, secs))
}
