//! The chained pipeline with a content-addressed stage cache.
//!
//! Each stage has a key hashed from the config values it reads and the
//! digests of its input files. A stage is skipped when the manifest records
//! the same key and every recorded output still has its recorded digest; a
//! changed digest is reported as corruption rather than silently redone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tubeplan::planner::PlanStatus;

use crate::commands::{self, CONFIDENCE_FILE, DATA_DIR, PLAN_FILE, REPORT_CSV, REPORT_JSON, SAWTOOTH_FILE, STATS_FILE, TREE_FILE, TUBE_FILE};
use crate::config::{digest, Experiment};
use crate::error::{CliError, CliResult};
use crate::files::{file_sha256, read_json, write_json, PlanFile};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    /// Output path relative to the run directory, mapped to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    CacheHit,
    Skipped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSummary {
    pub stages: Vec<(&'static str, StageOutcome)>,
    pub status: PlanStatus,
}

impl PipelineSummary {
    pub fn outcome(&self, stage: &str) -> Option<StageOutcome> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, o)| *o)
    }
}

pub const STAGES: [&str; 5] = ["gen-data", "learn-tube", "learn-confidence", "plan", "validate"];

struct Runner<'a> {
    dir: &'a Path,
    manifest: Manifest,
    summary: Vec<(&'static str, StageOutcome)>,
}

impl Runner<'_> {
    /// Digest of a stage's recorded outputs, for keying later stages.
    fn outputs_digest(&self, stage: &str) -> String {
        digest(&self.manifest.stages.get(stage).map(|s| &s.outputs))
    }

    fn run(&mut self, stage: &'static str, key: String, body: impl FnOnce() -> CliResult<Vec<PathBuf>>) -> CliResult<()> {
        if let Some(prev) = self.manifest.stages.get(stage).filter(|p| p.key == key) {
            let mut intact = true;
            for (rel, sha) in &prev.outputs {
                let path = self.dir.join(rel);
                if !path.exists() {
                    intact = false;
                    continue;
                }
                let found = file_sha256(&path)?;
                if &found != sha {
                    return Err(CliError::integrity(format!(
                        "stage {stage}: hash mismatch for {rel} (recorded {sha}, found {found})"
                    )));
                }
            }
            if intact {
                self.summary.push((stage, StageOutcome::CacheHit));
                return Ok(());
            }
        }
        let produced = body().map_err(|e| e.context(format!("stage {stage} failed")))?;
        let mut outputs = BTreeMap::new();
        for path in produced {
            let rel = path.strip_prefix(self.dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            outputs.insert(rel, file_sha256(&path)?);
        }
        self.manifest.stages.insert(stage.to_string(), StageRecord { key, outputs });
        self.save()?;
        self.summary.push((stage, StageOutcome::Ran));
        Ok(())
    }

    fn skip(&mut self, stage: &'static str) -> CliResult<()> {
        if self.manifest.stages.remove(stage).is_some() {
            self.save()?;
        }
        self.summary.push((stage, StageOutcome::Skipped));
        Ok(())
    }

    fn save(&self) -> CliResult<()> {
        write_json(&self.dir.join(MANIFEST_FILE), &self.manifest)
    }
}

fn files_in(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

/// Runs gen-data → learn-tube → learn-confidence → plan → validate in
/// `dir`, reusing every stage whose inputs are unchanged. Validation is
/// skipped when planning does not succeed.
pub fn run_pipeline(exp: &Experiment, dir: &Path) -> CliResult<PipelineSummary> {
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let fresh = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        config_hash: exp.config_hash(),
        seed: exp.seed(),
        stages: BTreeMap::new(),
    };
    let mut manifest = if manifest_path.exists() {
        let m: Manifest = read_json(&manifest_path)?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(CliError::integrity(format!("manifest has format version {}", m.format_version)));
        }
        m
    } else {
        fresh.clone()
    };
    manifest.config_hash = fresh.config_hash;
    manifest.seed = fresh.seed;
    let mut r = Runner { dir, manifest, summary: Vec::new() };
    let c = &exp.config;

    let data_dir = dir.join(DATA_DIR);
    let key = digest(&("gen-data", &exp.system, &exp.truth, &c.data, &exp.taus, commands::data_seed(exp)));
    r.run("gen-data", key, || {
        if data_dir.exists() {
            std::fs::remove_dir_all(&data_dir)?;
        }
        commands::gen_data(exp, &data_dir)?;
        files_in(&data_dir)
    })?;

    let key = digest(&("learn-tube", &exp.system, &exp.support, &c.tube, commands::cluster_seed(exp), r.outputs_digest("gen-data")));
    r.run("learn-tube", key, || {
        commands::learn_tube(exp, &data_dir, dir)?;
        Ok(vec![dir.join(TUBE_FILE), dir.join(SAWTOOTH_FILE)])
    })?;

    let tube_path = dir.join(TUBE_FILE);
    let key = digest(&("learn-confidence", exp.p_safe, r.outputs_digest("learn-tube")));
    let needs_confidence = c.planner.checker.needs_confidence();
    if needs_confidence {
        r.run("learn-confidence", key, || {
            commands::learn_confidence(exp, &tube_path, dir)?;
            Ok(vec![dir.join(CONFIDENCE_FILE)])
        })?;
    } else {
        r.skip("learn-confidence")?;
    }

    let env = exp.environment(0)?;
    let key = digest(&(
        "plan",
        &env,
        &exp.config.environment.start,
        &c.planner,
        exp.p_safe,
        exp.seed(),
        r.outputs_digest("learn-tube"),
        r.outputs_digest("learn-confidence"),
    ));
    let confidence_path = needs_confidence.then(|| dir.join(CONFIDENCE_FILE));
    r.run("plan", key, || {
        commands::plan_command(exp, &tube_path, confidence_path.as_deref(), dir)?;
        Ok(vec![dir.join(PLAN_FILE), dir.join(TREE_FILE), dir.join(STATS_FILE)])
    })?;
    let status = PlanFile::load(&dir.join(PLAN_FILE))?.status;

    if status == PlanStatus::Solved {
        let key = digest(&(
            "validate",
            &exp.system,
            &exp.truth,
            &env,
            &c.validate,
            exp.p_safe,
            commands::rollout_seed(exp),
            r.outputs_digest("plan"),
            r.outputs_digest("learn-tube"),
        ));
        r.run("validate", key, || {
            commands::validate_command(exp, &dir.join(PLAN_FILE), Some(&tube_path), dir)?;
            Ok(vec![dir.join(REPORT_JSON), dir.join(REPORT_CSV)])
        })?;
    } else {
        r.skip("validate")?;
    }
    Ok(PipelineSummary { stages: r.summary, status })
}
