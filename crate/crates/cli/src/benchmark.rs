//! Batch planning over environment families and checkers.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tubeplan::planner::PlanStatus;
use tubeplan::validity::CheckerKind;

use crate::commands::{load_confidence, plan_once, write_plan_outputs};
use crate::config::{BenchmarkSuite, Experiment, FamilySpec};
use crate::error::{CliError, CliResult};
use crate::files::{write_json, ConfidenceSet, TubeSet};

pub const BENCHMARK_CSV: &str = "benchmark.csv";
pub const BENCHMARK_JSON: &str = "benchmark.json";
pub const TIMINGS_CSV: &str = "timings.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub config_hash: String,
    pub seed: u64,
    pub family: String,
    pub checker: String,
    pub trial: usize,
    pub status: PlanStatus,
    pub iterations: u64,
    pub nodes: u64,
    pub horizon: Option<usize>,
    pub exact_calls: u64,
    pub lazy_calls: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub family: String,
    pub checker: String,
    pub trials: usize,
    pub solved: usize,
    pub success_rate: f64,
    pub mean_nodes: f64,
}

/// Everything but wall time, which lives in [`BenchmarkResults::seconds`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub config_hash: String,
    pub rows: Vec<TrialRow>,
    pub summary: Vec<CellSummary>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkResults {
    pub table: BenchmarkTable,
    /// Planning time per row, same order as `table.rows`.
    pub seconds: Vec<f64>,
}

impl BenchmarkResults {
    pub fn cell(&self, family: &str, checker: CheckerKind) -> Option<&CellSummary> {
        self.table.summary.iter().find(|c| c.family == family && c.checker == checker.name())
    }

    /// Mean planning time over the solved trials of a cell.
    pub fn mean_solve_seconds(&self, family: &str, checker: CheckerKind) -> Option<f64> {
        let times: Vec<f64> = self
            .table
            .rows
            .iter()
            .zip(&self.seconds)
            .filter(|(r, _)| r.family == family && r.checker == checker.name() && r.status == PlanStatus::Solved)
            .map(|(_, s)| *s)
            .collect();
        (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64)
    }
}

/// Display name of a family, matching the generated environment names.
pub fn family_label(spec: &FamilySpec) -> String {
    match (spec.family.as_str(), spec.width) {
        ("narrow", Some(w)) => format!("narrow({w})"),
        (f, _) => f.to_string(),
    }
}

/// The suite from the config, with the experiment's environment and checker
/// filling in empty lists.
pub fn effective_suite(exp: &Experiment) -> CliResult<BenchmarkSuite> {
    let mut suite = exp.config.benchmark.clone().ok_or_else(|| CliError::config("config has no [benchmark] section"))?;
    if suite.families.is_empty() {
        let e = &exp.config.environment;
        let family = e.family.clone().ok_or_else(|| CliError::config("benchmark needs families or a generated environment"))?;
        suite.families.push(FamilySpec { family, width: e.width });
    }
    if suite.checkers.is_empty() {
        suite.checkers.push(exp.config.planner.checker);
    }
    Ok(suite)
}

/// Runs every (family, checker, trial) cell in a worker pool. Trial `i`
/// plans with seed `seed + i` on layout seed `environment.seed + i`; rows are
/// merged in index order, so the table does not depend on scheduling.
pub fn run_benchmark(
    exp: &Experiment,
    suite: &BenchmarkSuite,
    tubes: &TubeSet,
    confidence: Option<&ConfidenceSet>,
    artifacts: Option<&Path>,
) -> CliResult<BenchmarkResults> {
    if suite.trials == 0 {
        return Err(CliError::config("benchmark needs at least one trial"));
    }
    if confidence.is_none() {
        if let Some(c) = suite.checkers.iter().find(|c| c.needs_confidence()) {
            return Err(CliError::config(format!("the {} checker needs a confidence file", c.name())));
        }
    }
    let mut jobs = Vec::new();
    for f in &suite.families {
        for &c in &suite.checkers {
            for i in 0..suite.trials {
                jobs.push((f, c, i));
            }
        }
    }
    let hash = exp.config_hash();
    let mut exp = exp.clone();
    if suite.timeout_secs.is_some() {
        exp.config.planner.timeout_secs = suite.timeout_secs;
    }
    let outcomes = jobs
        .par_iter()
        .map(|&(f, checker, i)| -> CliResult<(TrialRow, f64)> {
            let env = exp.family_environment(f, i as u64)?;
            let seed = exp.seed().wrapping_add(i as u64);
            let conf = if checker.needs_confidence() { confidence } else { None };
            let result = plan_once(&exp, tubes, conf, &env, seed, checker)?;
            let label = family_label(f);
            if let Some(dir) = artifacts {
                let sub = dir.join(format!("{label}_{}_{i}", checker.name()));
                std::fs::create_dir_all(&sub)?;
                write_plan_outputs(&exp, seed, checker, &result, &sub)?;
            }
            let row = TrialRow {
                config_hash: hash.clone(),
                seed,
                family: label,
                checker: checker.name().into(),
                trial: i,
                status: result.status,
                iterations: result.stats.iterations,
                nodes: result.stats.nodes,
                horizon: result.plan.as_ref().map(|p| p.horizon()),
                exact_calls: result.stats.checker.exact_calls,
                lazy_calls: result.stats.checker.lazy_calls,
            };
            Ok((row, result.stats.wall_time.as_secs_f64()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let (rows, seconds): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let mut summary = Vec::new();
    for f in &suite.families {
        let label = family_label(f);
        for &c in &suite.checkers {
            let cell: Vec<&TrialRow> = rows.iter().filter(|r| r.family == label && r.checker == c.name()).collect();
            let solved = cell.iter().filter(|r| r.status == PlanStatus::Solved).count();
            summary.push(CellSummary {
                family: label.clone(),
                checker: c.name().into(),
                trials: cell.len(),
                solved,
                success_rate: solved as f64 / cell.len() as f64,
                mean_nodes: cell.iter().map(|r| r.nodes as f64).sum::<f64>() / cell.len() as f64,
            });
        }
    }
    Ok(BenchmarkResults { table: BenchmarkTable { config_hash: hash, rows, summary }, seconds })
}

/// Loads the prebuilt tubes, runs the suite and writes the table (CSV and
/// JSON) plus a separate timings file.
pub fn benchmark_command(
    exp: &Experiment,
    tube_path: &Path,
    confidence_path: Option<&Path>,
    out_dir: &Path,
    keep_artifacts: bool,
) -> CliResult<BenchmarkResults> {
    if !tube_path.exists() {
        return Err(CliError::config(format!("missing tube file {}", tube_path.display())));
    }
    let suite = effective_suite(exp)?;
    let tubes = TubeSet::load(tube_path)?;
    let conf = confidence_path.map(|p| load_confidence(exp, p)).transpose()?;
    std::fs::create_dir_all(out_dir)?;
    let artifacts = (keep_artifacts || suite.keep_artifacts).then(|| out_dir.join("trials"));
    let results = run_benchmark(exp, &suite, &tubes, conf.as_ref(), artifacts.as_deref())?;
    std::fs::write(out_dir.join(BENCHMARK_CSV), table_csv(&results.table))?;
    write_json(&out_dir.join(BENCHMARK_JSON), &results.table)?;
    std::fs::write(out_dir.join(TIMINGS_CSV), timings_csv(&results))?;
    Ok(results)
}

pub fn table_csv(t: &BenchmarkTable) -> String {
    let mut csv = String::from("config_hash,seed,family,checker,trial,status,iterations,nodes,horizon,exact_calls,lazy_calls\n");
    for r in &t.rows {
        let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let horizon = r.horizon.map_or(String::new(), |h| h.to_string());
        writeln!(
            csv,
            "{},{},{},{},{},{status},{},{},{horizon},{},{}",
            r.config_hash, r.seed, r.family, r.checker, r.trial, r.iterations, r.nodes, r.exact_calls, r.lazy_calls
        )
        .expect("writing to a string");
    }
    csv
}

pub fn timings_csv(r: &BenchmarkResults) -> String {
    let mut csv = String::from("config_hash,seed,family,checker,trial,seconds\n");
    for (row, s) in r.table.rows.iter().zip(&r.seconds) {
        writeln!(csv, "{},{},{},{},{},{s}", row.config_hash, row.seed, row.family, row.checker, row.trial).expect("writing to a string");
    }
    csv
}
