//! Argument parsing and dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tubeplan::planner::PlanStatus;
use tubeplan::validity::CheckerKind;

use crate::benchmark::benchmark_command;
use crate::commands::{self, CONFIDENCE_FILE, DATA_DIR, PLAN_FILE, TUBE_FILE};
use crate::config::{Experiment, ExperimentConfig, Overrides};
use crate::error::{CliError, CliResult, ExitStatus};
use crate::pipeline::run_pipeline;

#[derive(Debug, Parser)]
#[command(name = "tubeplan", version, about = "Distributionally robust motion planning with learned Wasserstein tubes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// exact, lazy, hybrid or bandit.
    #[arg(long, global = true, value_parser = parse_checker)]
    pub checker: Option<CheckerKind>,
    #[arg(long = "p-safe", global = true, conflicts_with = "risk")]
    pub p_safe: Option<f64>,
    /// Shorthand for `--p-safe 1-RISK`.
    #[arg(long, global = true)]
    pub risk: Option<f64>,
    /// Planner iteration budget.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// Wall-clock planning limit in seconds (makes runs machine dependent).
    #[arg(long, global = true)]
    pub timeout: Option<f64>,
    #[arg(long = "out-dir", global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate error trajectories into a sample archive.
    GenData,
    /// Learn the ambiguity tubes and their (t, eps) table.
    LearnTube {
        /// Sample archive directory [default: OUT_DIR/data].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Size the confidence balls for the lazy checks.
    LearnConfidence {
        #[arg(long)]
        tube: Option<PathBuf>,
    },
    /// Grow a tree and write the plan, tree dump and stats.
    Plan {
        #[arg(long)]
        tube: Option<PathBuf>,
        #[arg(long)]
        confidence: Option<PathBuf>,
    },
    /// Score a plan by Monte Carlo rollouts under the ground truth.
    Validate {
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Tube file for the certified bound; omit to skip it.
        #[arg(long)]
        tube: Option<PathBuf>,
    },
    /// Run the configured benchmark suite.
    Benchmark {
        #[arg(long)]
        tube: Option<PathBuf>,
        #[arg(long)]
        confidence: Option<PathBuf>,
        /// Keep each trial's plan, tree and stats.
        #[arg(long)]
        keep_artifacts: bool,
    },
    /// All stages with a content-hash cache.
    Pipeline,
}

fn parse_checker(s: &str) -> Result<CheckerKind, String> {
    s.parse().map_err(|e: tubeplan::Error| e.to_string())
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            budget: self.budget,
            timeout_secs: self.timeout,
            checker: self.checker,
            p_safe: self.p_safe,
            risk: self.risk,
        }
    }
}

/// Loads the config with overrides in increasing precedence: file,
/// environment variables, flags.
pub fn load_experiment(common: &Common, env: impl Fn(&str) -> Option<String>) -> CliResult<Experiment> {
    let path = common.config.as_deref().ok_or_else(|| CliError::config("--config is required"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env(env)?;
    cfg.apply(&common.overrides());
    Experiment::resolve(cfg)
}

fn status_code(s: PlanStatus) -> ExitStatus {
    match s {
        PlanStatus::Solved => ExitStatus::Success,
        PlanStatus::Timeout => ExitStatus::Timeout,
        PlanStatus::InvalidStart => ExitStatus::InvalidStart,
    }
}

fn or_default(given: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| dir.join(name))
}

pub fn execute(cli: &Cli) -> CliResult<ExitStatus> {
    let exp = load_experiment(&cli.common, |k| std::env::var(k).ok())?;
    let out = cli.common.out_dir.as_path();
    match &cli.command {
        Command::GenData => {
            let m = commands::gen_data(&exp, &out.join(DATA_DIR))?;
            println!("wrote {} trajectories at anchors {:?} to {}", m.count, m.taus, out.join(DATA_DIR).display());
        }
        Command::LearnTube { data } => {
            let set = commands::learn_tube(&exp, &or_default(data, out, DATA_DIR), out)?;
            for (l, t) in set.tubes.iter().enumerate() {
                println!("tube {l}: eps_0 = {:.6}, eps_T = {:.6}", t.radius_at(0).1, t.radius_at(t.t_max()).1);
            }
        }
        Command::LearnConfidence { tube } => {
            let conf = commands::learn_confidence(&exp, &or_default(tube, out, TUBE_FILE), out)?;
            for (l, c) in conf.tubes.iter().enumerate() {
                println!("confidence tube {l}: target {:.6}, radii {:?}", c.target, c.radii);
            }
        }
        Command::Plan { tube, confidence } => {
            let conf = confidence
                .clone()
                .or_else(|| exp.config.planner.checker.needs_confidence().then(|| out.join(CONFIDENCE_FILE)));
            let status = commands::plan_command(&exp, &or_default(tube, out, TUBE_FILE), conf.as_deref(), out)?;
            println!("plan: {status:?}");
            return Ok(status_code(status));
        }
        Command::Validate { plan, tube } => {
            let r = commands::validate_command(&exp, &or_default(plan, out, PLAN_FILE), tube.as_deref(), out)?;
            println!(
                "rollouts {}: max collision {:.6}, goal {:.6}, trajectory safe {:.6}",
                r.rollouts,
                r.max_collision(),
                r.goal.value,
                r.trajectory_safe.value
            );
        }
        Command::Benchmark { tube, confidence, keep_artifacts } => {
            let conf = confidence.clone().or_else(|| {
                let p = out.join(CONFIDENCE_FILE);
                p.exists().then_some(p)
            });
            let r = benchmark_command(&exp, &or_default(tube, out, TUBE_FILE), conf.as_deref(), out, *keep_artifacts)?;
            for c in &r.table.summary {
                println!("{} / {}: {}/{} solved, mean nodes {:.1}", c.family, c.checker, c.solved, c.trials, c.mean_nodes);
            }
        }
        Command::Pipeline => {
            let s = run_pipeline(&exp, out)?;
            for (stage, outcome) in &s.stages {
                println!("{stage}: {outcome:?}");
            }
            return Ok(status_code(s.status));
        }
    }
    Ok(ExitStatus::Success)
}
