//! The individual pipeline stages. Every stage reads and writes files so it
//! can run on its own or under the cached pipeline.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use tubeplan::montecarlo::{read_error_archive, validate_plan, write_error_archive, ArchiveManifest, ValidationReport};
use tubeplan::planner::{plan, tree_csv, PlanResult, PlanStatus};
use tubeplan::tube::{learn_family, TubeSpec};
use tubeplan::validity::{build_confidence_tube, CheckContext, CheckerKind};

use crate::config::{Experiment, Layout};
use crate::error::{CliError, CliResult};
use crate::files::{read_json, with_provenance, write_json, ConfidenceSet, PlanFile, StatsFile, TubeSet, CONFIDENCE_SET_FORMAT_VERSION};

pub const DATA_DIR: &str = "data";
pub const TUBE_FILE: &str = "tube.json";
pub const SAWTOOTH_FILE: &str = "sawtooth.csv";
pub const CONFIDENCE_FILE: &str = "confidence.json";
pub const PLAN_FILE: &str = "plan.json";
pub const TREE_FILE: &str = "tree.csv";
pub const STATS_FILE: &str = "stats.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Seeds of the random stages, all derived from the experiment seed.
pub fn data_seed(exp: &Experiment) -> u64 {
    exp.seed()
}
pub fn cluster_seed(exp: &Experiment) -> u64 {
    exp.seed().wrapping_add(1)
}
pub fn rollout_seed(exp: &Experiment) -> u64 {
    exp.seed().wrapping_add(2)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Simulates the error dynamics and writes the sample archive to `dir`.
pub fn gen_data(exp: &Experiment, dir: &Path) -> CliResult<ArchiveManifest> {
    Ok(write_error_archive(&exp.sys, &exp.law, &exp.truth, exp.config.data.samples, &exp.taus, data_seed(exp), dir)?)
}

/// Projections of the configured layout, workspace first.
pub fn layout_projections(exp: &Experiment) -> Vec<DMatrix<f64>> {
    let t = &exp.config.tube;
    match t.layout {
        Layout::Full => vec![DMatrix::identity(exp.sys.n(), exp.sys.n())],
        Layout::Projected if t.control_channel => vec![exp.position_map(), -exp.law.gain().clone()],
        Layout::Projected => vec![exp.position_map()],
    }
}

/// Learns the layout's tubes from an archive; writes the tube file and the
/// `(t, ε_t)` table to `out_dir`.
pub fn learn_tube(exp: &Experiment, data_dir: &Path, out_dir: &Path) -> CliResult<TubeSet> {
    let (manifest, data) = read_error_archive(data_dir)?;
    if manifest.n != exp.sys.n() || manifest.d != exp.sys.d() {
        return Err(CliError::config("sample archive does not match the system dimensions"));
    }
    let t = &exp.config.tube;
    let spec = TubeSpec {
        taus: manifest.taus.clone(),
        beta: t.beta,
        family_size: 1,
        moment_x0: 0.0,
        moment_w: 0.0,
        support: exp.support,
        t_max: t.t_max,
        cluster_k: t.cluster_k,
        q: t.q,
        c_g: t.c_g,
        seed: cluster_seed(exp),
    };
    let family = learn_family(&data, &exp.sys, &exp.law, &spec, &layout_projections(exp))?;
    let set = TubeSet { layout: t.layout, tubes: family.tubes.into_iter().map(Arc::new).collect() };
    create_dir(out_dir)?;
    set.save(&out_dir.join(TUBE_FILE))?;
    std::fs::write(out_dir.join(SAWTOOTH_FILE), sawtooth_csv(exp, &set))?;
    Ok(set)
}

/// One row per channel and time step up to `t_max`.
pub fn sawtooth_csv(exp: &Experiment, set: &TubeSet) -> String {
    let mut csv = String::from("channel,t,tau,eps\n");
    for (l, tube) in set.tubes.iter().enumerate() {
        for (t, tau, eps) in tube.radius_table(tube.t_max()) {
            writeln!(csv, "{l},{t},{tau},{eps:?}").expect("writing to a string");
        }
    }
    with_provenance(&csv, &exp.config_hash(), exp.seed())
}

/// Sizes confidence balls for every tube of the set. With `L` tubes each
/// ball targets `1 - (1 - p_safe) / L`.
pub fn learn_confidence(exp: &Experiment, tube_path: &Path, out_dir: &Path) -> CliResult<ConfidenceSet> {
    let set = TubeSet::load(tube_path)?;
    let target = 1.0 - (1.0 - exp.p_safe) / set.tubes.len() as f64;
    let tubes = set.tubes.iter().map(|t| build_confidence_tube(t, target)).collect::<Result<_, _>>()?;
    let conf = ConfidenceSet { format_version: CONFIDENCE_SET_FORMAT_VERSION, p_safe: exp.p_safe, tubes };
    create_dir(out_dir)?;
    write_json(&out_dir.join(CONFIDENCE_FILE), &conf)?;
    Ok(conf)
}

/// Loads a confidence file and checks it was built for this `p_safe`.
pub fn load_confidence(exp: &Experiment, path: &Path) -> CliResult<ConfidenceSet> {
    let conf = ConfidenceSet::load(path)?;
    if (conf.p_safe - exp.p_safe).abs() > 1e-12 {
        return Err(CliError::config(format!("confidence file was built for p_safe {}, not {}", conf.p_safe, exp.p_safe)));
    }
    Ok(conf)
}

/// Confidence tubes are only loaded when the checker needs them.
fn confidence_for(exp: &Experiment, checker: CheckerKind, path: Option<&Path>) -> CliResult<Option<ConfidenceSet>> {
    match (checker.needs_confidence(), path) {
        (false, _) => Ok(None),
        (true, Some(p)) => load_confidence(exp, p).map(Some),
        (true, None) => Err(CliError::config(format!("the {} checker needs a confidence file", checker.name()))),
    }
}

/// Runs one planning query against the configured environment.
pub fn plan_once(
    exp: &Experiment,
    tubes: &TubeSet,
    confidence: Option<&ConfidenceSet>,
    env: &tubeplan::geometry::Environment,
    seed: u64,
    checker: CheckerKind,
) -> CliResult<PlanResult> {
    let ctx = CheckContext::new(tubes.channels(env, &exp.law, confidence)?, exp.p_safe)?;
    let cfg = exp.planner_config(seed, checker)?;
    Ok(plan(&exp.sys, ctx, env, exp.start(), &cfg)?)
}

/// Plans and writes the plan file, tree dump and stats block.
pub fn plan_command(exp: &Experiment, tube_path: &Path, confidence_path: Option<&Path>, out_dir: &Path) -> CliResult<PlanStatus> {
    let checker = exp.config.planner.checker;
    let tubes = TubeSet::load(tube_path)?;
    let conf = confidence_for(exp, checker, confidence_path)?;
    let env = exp.environment(0)?;
    let result = plan_once(exp, &tubes, conf.as_ref(), &env, exp.seed(), checker)?;
    create_dir(out_dir)?;
    write_plan_outputs(exp, exp.seed(), checker, &result, out_dir)?;
    Ok(result.status)
}

pub fn write_plan_outputs(exp: &Experiment, seed: u64, checker: CheckerKind, result: &PlanResult, out_dir: &Path) -> CliResult<()> {
    let hash = exp.config_hash();
    write_json(&out_dir.join(PLAN_FILE), &PlanFile::new(hash.clone(), seed, result.status, result.plan.as_ref()))?;
    std::fs::write(out_dir.join(TREE_FILE), with_provenance(&tree_csv(&result.tree), &hash, seed))?;
    let stats = StatsFile {
        config_hash: hash,
        seed,
        checker: checker.name().into(),
        status: result.status,
        horizon: result.plan.as_ref().map(|p| p.horizon()),
        stats: result.stats.clone(),
    };
    write_json(&out_dir.join(STATS_FILE), &stats)
}

/// Monte Carlo validation of a stored plan under the ground truth. With a
/// tube file the certified per-step bound is reported alongside.
pub fn validate_command(exp: &Experiment, plan_path: &Path, tube_path: Option<&Path>, out_dir: &Path) -> CliResult<ValidationReport> {
    let plan_file = PlanFile::load(plan_path)?;
    let plan = plan_file.motion_plan()?;
    let env = exp.environment(0)?;
    let ctx = match (tube_path, exp.config.validate.certify) {
        (Some(p), true) => Some(CheckContext::new(TubeSet::load(p)?.channels(&env, &exp.law, None)?, exp.p_safe)?),
        _ => None,
    };
    let report = validate_plan(&plan, &exp.sys, &exp.law, &exp.truth, &env, exp.config.validate.rollouts, rollout_seed(exp), ctx.as_ref())?;
    create_dir(out_dir)?;
    write_json(&out_dir.join(REPORT_JSON), &report)?;
    std::fs::write(out_dir.join(REPORT_CSV), report_csv(exp, &report))?;
    Ok(report)
}

/// Tidy table: one row per quantity and time step.
pub fn report_csv(exp: &Experiment, r: &ValidationReport) -> String {
    let mut csv = String::from("quantity,t,hits,trials,value,lower,upper,certified_safe\n");
    let mut row = |q: &str, t: Option<usize>, f: &tubeplan::montecarlo::Frequency, cert: Option<f64>| {
        let t = t.map_or(String::new(), |t| t.to_string());
        let cert = cert.map_or(String::new(), |c| format!("{c:?}"));
        writeln!(csv, "{q},{t},{},{},{:?},{:?},{:?},{cert}", f.hits, f.trials, f.value, f.lower, f.upper).expect("writing to a string");
    };
    for (t, f) in r.collision.iter().enumerate() {
        row("collision", Some(t), f, r.certified_safe.as_ref().and_then(|c| c.get(t).copied()));
    }
    for (t, f) in r.control_violation.iter().enumerate() {
        row("control_violation", Some(t), f, None);
    }
    row("trajectory_safe", None, &r.trajectory_safe, None);
    row("goal", None, &r.goal, None);
    with_provenance(&csv, &exp.config_hash(), exp.seed())
}

/// Reads a stored report back.
pub fn load_report(path: &Path) -> CliResult<ValidationReport> {
    read_json(path)
}
