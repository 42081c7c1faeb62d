//! Experiment configuration: one TOML file per experiment, with environment
//! variable overrides for the planning budget and the seed.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tubeplan::geometry::{generate_environment, Environment, EnvironmentFamily, Primitive, SetExpr};
use tubeplan::linsys::{support_diameter_bound, FeedbackLaw, LinearSystem, SupportSpec};
use tubeplan::montecarlo::GroundTruth;
use tubeplan::planner::PlannerConfig;
use tubeplan::scenarios::{self, NoiseKind, Preset};
use tubeplan::tube::select_taus;
use tubeplan::validity::CheckerKind;

use crate::error::{CliError, CliResult};
use crate::files::{read_json, SystemFile, TruthFile};

pub const SEED_VAR: &str = "TUBEPLAN_SEED";
pub const BUDGET_VAR: &str = "TUBEPLAN_BUDGET";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Lower bound every chance constraint must exceed. Give this or `risk`.
    #[serde(default)]
    pub p_safe: Option<f64>,
    #[serde(default)]
    pub risk: Option<f64>,
    pub system: SystemSource,
    #[serde(default)]
    pub noise: NoiseSource,
    pub data: DataConfig,
    pub tube: TubeConfig,
    pub environment: EnvironmentConfig,
    pub planner: PlannerSection,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub benchmark: Option<BenchmarkSuite>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSource {
    #[serde(default)]
    pub preset: Option<Preset>,
    /// JSON system file; relative paths resolve against the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSource {
    #[serde(default = "default_noise_kind")]
    pub kind: NoiseKind,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

impl Default for NoiseSource {
    fn default() -> Self {
        Self { kind: default_noise_kind(), scale: 1.0, path: None }
    }
}

fn default_noise_kind() -> NoiseKind {
    NoiseKind::Gaussian
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    /// Explicit anchor times. Without them `anchor_count` anchors are picked
    /// from `0..=anchor_horizon` by greedy selection.
    #[serde(default)]
    pub taus: Option<Vec<usize>>,
    #[serde(default)]
    pub anchor_count: Option<usize>,
    #[serde(default)]
    pub anchor_horizon: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One full-state tube.
    Full,
    /// A workspace tube and optionally a control tube through `-K`.
    Projected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeConfig {
    pub beta: f64,
    pub cluster_k: usize,
    pub t_max: usize,
    pub layout: Layout,
    #[serde(default = "default_positions")]
    pub position_indices: Vec<usize>,
    #[serde(default)]
    pub control_channel: bool,
    #[serde(default = "default_q")]
    pub q: u32,
    #[serde(default = "one")]
    pub c_g: f64,
}

fn default_positions() -> Vec<usize> {
    vec![0, 1]
}

fn default_q() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// `scattered`, `cluttered`, `narrow`, `random` or `open`; ignored when
    /// `path` names an environment file.
    #[serde(default)]
    pub family: Option<String>,
    #[serde(default)]
    pub width: Option<f64>,
    #[serde(default = "default_size")]
    pub size: f64,
    #[serde(default = "default_goal_radius")]
    pub goal_radius: f64,
    /// Seed of the generated layout; trial `i` of a benchmark uses `seed + i`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Radius of an origin-centered control ball `U`, if inputs are bounded.
    #[serde(default)]
    pub control_ball: Option<f64>,
    pub start: Vec<f64>,
}

fn default_size() -> f64 {
    100.0
}

fn default_goal_radius() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSection {
    pub checker: CheckerKind,
    pub max_iterations: usize,
    #[serde(default)]
    pub timeout_secs: Option<f64>,
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub control_lo: Vec<f64>,
    pub control_hi: Vec<f64>,
    #[serde(default)]
    pub durations: Option<Vec<usize>>,
    #[serde(default)]
    pub goal_bias: Option<f64>,
    #[serde(default)]
    pub witness_radius: f64,
    #[serde(default)]
    pub metric_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    #[serde(default = "default_rollouts")]
    pub rollouts: usize,
    /// Also report the certified per-step safety bound from the tube.
    #[serde(default = "yes")]
    pub certify: bool,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self { rollouts: default_rollouts(), certify: true }
    }
}

fn default_rollouts() -> usize {
    10_000
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub family: String,
    #[serde(default)]
    pub width: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSuite {
    /// Defaults to the experiment's own environment family.
    #[serde(default)]
    pub families: Vec<FamilySpec>,
    pub trials: usize,
    #[serde(default)]
    pub checkers: Vec<CheckerKind>,
    /// Wall-clock limit per trial. Results then depend on machine speed.
    #[serde(default)]
    pub timeout_secs: Option<f64>,
    #[serde(default)]
    pub keep_artifacts: bool,
}

/// Command-line overrides; `None` leaves the configured value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub budget: Option<usize>,
    pub timeout_secs: Option<f64>,
    pub checker: Option<CheckerKind>,
    pub p_safe: Option<f64>,
    pub risk: Option<f64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(format!("bad config: {e}")))
    }

    /// Reads a config and makes its relative paths absolute.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.system.path, &mut cfg.noise.path, &mut cfg.environment.path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies `TUBEPLAN_SEED` and `TUBEPLAN_BUDGET` as read by `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> CliResult<()> {
        if let Some(v) = lookup(SEED_VAR) {
            self.seed = v.trim().parse().map_err(|_| CliError::config(format!("{SEED_VAR}={v} is not a seed")))?;
        }
        if let Some(v) = lookup(BUDGET_VAR) {
            self.planner.max_iterations =
                v.trim().parse().map_err(|_| CliError::config(format!("{BUDGET_VAR}={v} is not an iteration count")))?;
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(b) = o.budget {
            self.planner.max_iterations = b;
        }
        if let Some(t) = o.timeout_secs {
            self.planner.timeout_secs = Some(t);
        }
        if let Some(c) = o.checker {
            self.planner.checker = c;
        }
        if o.p_safe.is_some() || o.risk.is_some() {
            self.p_safe = o.p_safe;
            self.risk = o.risk;
        }
    }

    pub fn p_safe(&self) -> CliResult<f64> {
        let p = match (self.p_safe, self.risk) {
            (Some(p), None) => p,
            (None, Some(r)) => 1.0 - r,
            (Some(_), Some(_)) => return Err(CliError::config("give either p_safe or risk, not both")),
            (None, None) => return Err(CliError::config("missing p_safe (or risk)")),
        };
        if !(p > 0.0 && p < 1.0) {
            return Err(CliError::config(format!("p_safe {p} must lie in (0, 1)")));
        }
        Ok(p)
    }
}

/// Short hex digest of a serializable value.
pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

/// A config with every source loaded and checked.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub system: SystemFile,
    pub sys: LinearSystem,
    pub law: FeedbackLaw,
    pub truth: GroundTruth,
    pub support: SupportSpec,
    pub p_safe: f64,
    pub taus: Vec<usize>,
}

impl Experiment {
    pub fn resolve(config: ExperimentConfig) -> CliResult<Self> {
        let p_safe = config.p_safe()?;
        let (system, sys, law) = match (&config.system.preset, &config.system.path) {
            (Some(p), None) => {
                let (sys, law) = scenarios::preset(*p)?;
                (SystemFile::from_parts(&sys, &law, preset_dt(*p)), sys, law)
            }
            (None, Some(path)) => {
                let file: SystemFile = read_json(path)?;
                let (sys, law) = file.to_parts()?;
                (file, sys, law)
            }
            _ => return Err(CliError::config("system needs exactly one of preset or path")),
        };
        let truth = match (&config.noise.path, config.system.preset) {
            (Some(path), _) => read_json::<TruthFile>(path)?.into_truth()?,
            (None, Some(Preset::DoubleIntegrator)) => scenarios::double_integrator_noise(config.noise.kind, config.noise.scale),
            (None, Some(Preset::Drone)) if config.noise.kind == NoiseKind::Gaussian => scenarios::drone_noise(config.noise.scale),
            (None, Some(Preset::ErrorSystem2d)) if config.noise.kind == NoiseKind::Gaussian => scenarios::error_system_2d_noise(),
            _ => return Err(CliError::config("no preset noise for this system; give noise.path")),
        };
        let support = match system.support {
            Some(s) => s,
            None => truth.support(&sys)?,
        };
        let taus = anchor_times(&config, &sys, &law, support)?;
        let exp = Self { config, system, sys, law, truth, support, p_safe, taus };
        exp.check()?;
        Ok(exp)
    }

    fn check(&self) -> CliResult<()> {
        let c = &self.config;
        if c.data.samples == 0 {
            return Err(CliError::config("data.samples must be positive"));
        }
        if !(c.tube.beta > 0.0 && c.tube.beta < 1.0) || c.tube.cluster_k == 0 {
            return Err(CliError::config("tube.beta must lie in (0, 1) and tube.cluster_k be positive"));
        }
        if self.taus.iter().any(|&t| t > c.tube.t_max) {
            return Err(CliError::config("tube.t_max must cover every anchor time"));
        }
        if c.tube.position_indices.iter().any(|&i| i >= self.sys.n()) {
            return Err(CliError::config("tube.position_indices exceed the state dimension"));
        }
        if c.environment.start.len() != self.sys.n() {
            return Err(CliError::config(format!("environment.start needs {} entries", self.sys.n())));
        }
        if c.validate.rollouts == 0 {
            return Err(CliError::config("validate.rollouts must be positive"));
        }
        if let Some(b) = &c.benchmark {
            if b.trials == 0 || b.timeout_secs.is_some_and(|t| !(t > 0.0)) {
                return Err(CliError::config("benchmark needs trials >= 1 and a positive timeout"));
            }
        }
        self.planner_config(0, c.planner.checker)?.validate(&self.sys)?;
        self.environment(0)?;
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        digest(&self.config)
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn start(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.config.environment.start)
    }

    /// The configured environment with layout seed offset by `trial`.
    pub fn environment(&self, trial: u64) -> CliResult<Environment> {
        let e = &self.config.environment;
        let mut env = match &e.path {
            Some(path) => read_json::<crate::files::EnvironmentFile>(path)?.into_environment()?,
            None => {
                let family = e.family.as_deref().ok_or_else(|| CliError::config("environment needs family or path"))?;
                generated(family, e.width, e.size, e.goal_radius, e.seed + trial, &self.config.tube.position_indices)?
            }
        };
        if let Some(r) = e.control_ball {
            env.control_set = Some(Primitive::ball(vec![0.0; self.sys.m()], r).map_err(CliError::from)?);
        }
        env.validate()?;
        Ok(env)
    }

    /// Benchmark variant of [`Self::environment`] for another family.
    pub fn family_environment(&self, spec: &FamilySpec, trial: u64) -> CliResult<Environment> {
        let e = &self.config.environment;
        let mut env = generated(&spec.family, spec.width, e.size, e.goal_radius, e.seed + trial, &self.config.tube.position_indices)?;
        if let Some(r) = e.control_ball {
            env.control_set = Some(Primitive::ball(vec![0.0; self.sys.m()], r)?);
        }
        env.validate()?;
        Ok(env)
    }

    pub fn planner_config(&self, seed: u64, checker: CheckerKind) -> CliResult<PlannerConfig> {
        let p = &self.config.planner;
        let mut cfg = PlannerConfig::new(p.state_lo.clone(), p.state_hi.clone(), p.control_lo.clone(), p.control_hi.clone(), checker);
        cfg.max_iterations = p.max_iterations;
        cfg.timeout_secs = p.timeout_secs;
        if let Some(d) = &p.durations {
            cfg.durations = d.clone();
        }
        if let Some(g) = p.goal_bias {
            cfg.goal_bias = g;
        }
        cfg.witness_radius = p.witness_radius;
        cfg.metric_weights = p.metric_weights.clone();
        cfg.seed = seed;
        Ok(cfg)
    }

    /// Position-selection matrix for the workspace channel.
    pub fn position_map(&self) -> DMatrix<f64> {
        let idx = &self.config.tube.position_indices;
        let mut p = DMatrix::zeros(idx.len(), self.sys.n());
        for (r, &c) in idx.iter().enumerate() {
            p[(r, c)] = 1.0;
        }
        p
    }
}

fn preset_dt(p: Preset) -> Option<f64> {
    match p {
        Preset::DoubleIntegrator | Preset::Drone => Some(0.1),
        Preset::ErrorSystem2d => None,
    }
}

fn generated(family: &str, width: Option<f64>, size: f64, goal_radius: f64, seed: u64, positions: &[usize]) -> CliResult<Environment> {
    let fam = match family {
        "scattered" | "open" => EnvironmentFamily::Scattered,
        "cluttered" => EnvironmentFamily::Cluttered,
        "random" => EnvironmentFamily::Random,
        "narrow" => EnvironmentFamily::Narrow { width: width.ok_or_else(|| CliError::config("narrow family needs a width"))? },
        other => return Err(CliError::config(format!("unknown environment family {other}"))),
    };
    let mut env = generate_environment(fam, size, goal_radius, seed)?;
    if family == "open" {
        env.name = "open".into();
        env.obstacles = SetExpr::empty();
    }
    if positions.len() != 2 {
        return Err(CliError::config("generated environments are planar; use two position indices"));
    }
    env.position_indices = positions.to_vec();
    Ok(env)
}

/// Explicit anchors, or a greedy pick driven by a sample-free radius proxy:
/// the support diameter at `τ` scaled by `N^(-1/max(n, 2))`.
fn anchor_times(cfg: &ExperimentConfig, sys: &LinearSystem, law: &FeedbackLaw, support: SupportSpec) -> CliResult<Vec<usize>> {
    let d = &cfg.data;
    if let Some(t) = &d.taus {
        let mut sorted = t.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || sorted.len() != t.len() {
            return Err(CliError::config("data.taus must be a nonempty list of distinct times"));
        }
        return Ok(t.clone());
    }
    let (Some(count), Some(horizon)) = (d.anchor_count, d.anchor_horizon) else {
        return Err(CliError::config("data needs taus, or anchor_count with anchor_horizon"));
    };
    let rate = (d.samples.max(1) as f64).powf(-1.0 / sys.n().max(2) as f64);
    let proxy = |tau: usize| support_diameter_bound(sys, law, &support, tau).map_or(f64::INFINITY, |v| v * rate);
    let moments = (0.5 * support.diam_x0, 0.5 * support.diam_w);
    Ok(select_taus(horizon, count, sys, law, moments, cfg.tube.t_max, &proxy)?)
}
