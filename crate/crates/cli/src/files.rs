//! Versioned JSON artifacts exchanged between subcommands.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tubeplan::geometry::Environment;
use tubeplan::linsys::{from_rows, to_rows, FeedbackLaw, LinearSystem, MotionPlan, SupportSpec};
use tubeplan::montecarlo::{GroundTruth, NoiseModel};
use tubeplan::planner::{PlanStats, PlanStatus};
use tubeplan::tube::{AmbiguityTube, TubeFile};
use tubeplan::validity::{full_layout, projected_layout, Channel, ConfidenceTube};

use crate::config::Layout;
use crate::error::{CliError, CliResult};

pub const SYSTEM_FORMAT_VERSION: u32 = 1;
pub const TRUTH_FORMAT_VERSION: u32 = 1;
pub const ENVIRONMENT_FORMAT_VERSION: u32 = 1;
pub const TUBE_SET_FORMAT_VERSION: u32 = 1;
pub const CONFIDENCE_SET_FORMAT_VERSION: u32 = 1;
pub const PLAN_FORMAT_VERSION: u32 = 1;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::integrity(format!("corrupt file {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn check_version(what: &str, found: u32, expected: u32) -> CliResult<()> {
    if found != expected {
        return Err(CliError::integrity(format!("{what} has format version {found}, expected {expected}")));
    }
    Ok(())
}

/// Adds `config_hash` and `seed` columns in front of every CSV row.
pub fn with_provenance(csv: &str, config_hash: &str, seed: u64) -> String {
    let mut out = String::with_capacity(csv.len() + 32 * csv.lines().count());
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            out.push_str("config_hash,seed,");
        } else {
            out.push_str(&format!("{config_hash},{seed},"));
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Plant and feedback gain as row-major arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemFile {
    pub format_version: u32,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    /// Sampling period, informational only.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Overrides the support diameters implied by the noise models.
    #[serde(default)]
    pub support: Option<SupportSpec>,
}

impl SystemFile {
    pub fn from_parts(sys: &LinearSystem, law: &FeedbackLaw, dt: Option<f64>) -> Self {
        Self {
            format_version: SYSTEM_FORMAT_VERSION,
            a: to_rows(sys.a()),
            b: to_rows(sys.b()),
            g: to_rows(sys.g()),
            k: to_rows(law.gain()),
            dt,
            support: None,
        }
    }

    pub fn to_parts(&self) -> CliResult<(LinearSystem, FeedbackLaw)> {
        check_version("system file", self.format_version, SYSTEM_FORMAT_VERSION)?;
        let sys = LinearSystem::new(from_rows(&self.a)?, from_rows(&self.b)?, from_rows(&self.g)?)?;
        let k = from_rows(&self.k)?;
        if k.nrows() != sys.m() || k.ncols() != sys.n() {
            return Err(CliError::config(format!("gain K must be {} x {}", sys.m(), sys.n())));
        }
        Ok((sys, FeedbackLaw::new(k)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub format_version: u32,
    pub x0: NoiseModel,
    pub w: NoiseModel,
}

impl TruthFile {
    pub fn into_truth(self) -> CliResult<GroundTruth> {
        check_version("ground-truth file", self.format_version, TRUTH_FORMAT_VERSION)?;
        Ok(GroundTruth { x0: self.x0, w: self.w })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentFile {
    pub format_version: u32,
    pub environment: Environment,
}

impl EnvironmentFile {
    pub fn into_environment(self) -> CliResult<Environment> {
        check_version("environment file", self.format_version, ENVIRONMENT_FORMAT_VERSION)?;
        Ok(self.environment)
    }
}

/// The tubes a layout needs: `[full]`, `[workspace]` or `[workspace, control]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TubeSetFile {
    pub format_version: u32,
    pub layout: Layout,
    pub tubes: Vec<TubeFile>,
}

#[derive(Clone, Debug)]
pub struct TubeSet {
    pub layout: Layout,
    pub tubes: Vec<Arc<AmbiguityTube>>,
}

impl TubeSet {
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let file = TubeSetFile {
            format_version: TUBE_SET_FORMAT_VERSION,
            layout: self.layout,
            tubes: self.tubes.iter().map(|t| t.to_file()).collect(),
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let file: TubeSetFile = read_json(path)?;
        check_version("tube file", file.format_version, TUBE_SET_FORMAT_VERSION)?;
        let expected = match file.layout {
            Layout::Full => 1..=1,
            Layout::Projected => 1..=2,
        };
        if !expected.contains(&file.tubes.len()) {
            return Err(CliError::integrity(format!("tube file {} holds {} tubes", path.display(), file.tubes.len())));
        }
        let tubes = file
            .tubes
            .into_iter()
            .map(|t| AmbiguityTube::from_file(t).map(Arc::new))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::from(e).context(path.display()))?;
        Ok(Self { layout: file.layout, tubes })
    }

    /// Checker channels for `env`, pairing tube `l` with confidence tube `l`.
    pub fn channels(&self, env: &Environment, law: &FeedbackLaw, confidence: Option<&ConfidenceSet>) -> CliResult<Vec<Channel>> {
        if let Some(c) = confidence {
            if c.tubes.len() != self.tubes.len() {
                return Err(CliError::config("confidence file does not match the tube file"));
            }
        }
        let conf = |l: usize| confidence.map(|c| c.tubes[l].clone());
        let channels = match self.layout {
            Layout::Full => full_layout(self.tubes[0].clone(), conf(0), env, law)?,
            Layout::Projected => {
                let control = self.tubes.get(1).map(|t| (t.clone(), conf(1)));
                if control.is_some() && env.control_set.is_none() {
                    return Err(CliError::config("a control tube needs an environment control set"));
                }
                projected_layout((self.tubes[0].clone(), conf(0)), control, env, law)?
            }
        };
        Ok(channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub format_version: u32,
    pub p_safe: f64,
    pub tubes: Vec<ConfidenceTube>,
}

impl ConfidenceSet {
    pub fn load(path: &Path) -> CliResult<Self> {
        let file: Self = read_json(path)?;
        check_version("confidence file", file.format_version, CONFIDENCE_SET_FORMAT_VERSION)?;
        for t in &file.tubes {
            t.validate().map_err(|e| CliError::from(e).context(path.display()))?;
        }
        Ok(file)
    }
}

/// Outcome of one planning query, with the plan when solved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub status: PlanStatus,
    /// Reference states `x̄_0..x̄_T`; empty unless solved.
    pub states: Vec<Vec<f64>>,
    /// Feedforward inputs `ū_0..ū_{T-1}`.
    pub controls: Vec<Vec<f64>>,
}

impl PlanFile {
    pub fn new(config_hash: String, seed: u64, status: PlanStatus, plan: Option<&MotionPlan>) -> Self {
        let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.as_slice().to_vec()).collect();
        Self {
            format_version: PLAN_FORMAT_VERSION,
            config_hash,
            seed,
            status,
            states: plan.map_or_else(Vec::new, |p| rows(&p.states)),
            controls: plan.map_or_else(Vec::new, |p| rows(&p.controls)),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let file: Self = read_json(path)?;
        check_version("plan file", file.format_version, PLAN_FORMAT_VERSION)?;
        Ok(file)
    }

    pub fn motion_plan(&self) -> CliResult<MotionPlan> {
        if self.status != PlanStatus::Solved {
            return Err(CliError::config("plan file holds no solution"));
        }
        if self.states.len() != self.controls.len() + 1 {
            return Err(CliError::integrity("plan file needs one more state than controls"));
        }
        let vecs = |v: &[Vec<f64>]| v.iter().map(|x| DVector::from_column_slice(x)).collect();
        Ok(MotionPlan { states: vecs(&self.states), controls: vecs(&self.controls) })
    }
}

/// Node and checker counters of a planning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub config_hash: String,
    pub seed: u64,
    pub checker: String,
    pub status: PlanStatus,
    pub horizon: Option<usize>,
    pub stats: PlanStats,
}
