//! Ground-truth noise models, training-data generation and Monte Carlo
//! validation of plans. The planner never sees these distributions; they
//! only produce samples and score results.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Environment;
use crate::linsys::{closed_loop_matrix, from_rows, FeedbackLaw, LinearSystem, MotionPlan, SupportSpec};
use crate::tube::AnchorSamples;
use crate::validity::{CheckContext, NodeQuery};

/// Trajectories per independently seeded work unit.
pub const CHUNK_SIZE: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// Gaussian conditioned on a Mahalanobis radius of at most `truncation`.
    TruncatedGaussian { mean: Vec<f64>, covariance: Vec<Vec<f64>>, truncation: f64 },
    /// `radius * ω1^(1/exponent) * Σ^{1/2} (cos 2πω2, sin 2πω2)` placed in
    /// coordinates `indices` of a `dim`-vector, with `ω` uniform on `[0,1]^2`.
    PushforwardUniform { dim: usize, indices: [usize; 2], sigma: Vec<Vec<f64>>, radius: f64, exponent: f64 },
    PointMass { value: Vec<f64> },
}

/// A noise model with its matrix square root precomputed.
#[derive(Clone, Debug)]
pub struct Sampler {
    model: NoiseModel,
    root: DMatrix<f64>,
    max_eigen: f64,
}

fn psd_root(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    if (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
        return Err(Error::NotPsd);
    }
    let eig = SymmetricEigen::new(cov.clone());
    let top = eig.eigenvalues.max().max(0.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * top.max(f64::MIN_POSITIVE)) {
        return Err(Error::NotPsd);
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok((&eig.eigenvectors * sqrt * eig.eigenvectors.transpose(), top))
}

impl Sampler {
    pub fn new(model: NoiseModel) -> Result<Self> {
        let (root, max_eigen) = match &model {
            NoiseModel::TruncatedGaussian { mean, covariance, truncation } => {
                let cov = from_rows(covariance)?;
                if cov.nrows() != mean.len() {
                    return Err(Error::Dimension("mean and covariance sizes differ".into()));
                }
                if !(*truncation > 0.0) {
                    return Err(Error::InvalidArgument("truncation must be positive".into()));
                }
                psd_root(&cov)?
            }
            NoiseModel::PushforwardUniform { dim, indices, sigma, radius, exponent } => {
                let s = from_rows(sigma)?;
                if s.nrows() != 2 || indices.iter().any(|&i| i >= *dim) || indices[0] == indices[1] {
                    return Err(Error::Dimension("pushforward noise needs a 2x2 scale and two distinct indices".into()));
                }
                if !(*radius >= 0.0 && *exponent > 0.0) {
                    return Err(Error::InvalidArgument("pushforward radius and exponent must be positive".into()));
                }
                psd_root(&s)?
            }
            NoiseModel::PointMass { value } => {
                if value.is_empty() {
                    return Err(Error::Dimension("point mass needs a value".into()));
                }
                (DMatrix::zeros(0, 0), 0.0)
            }
        };
        Ok(Self { model, root, max_eigen })
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            NoiseModel::TruncatedGaussian { mean, .. } => mean.len(),
            NoiseModel::PushforwardUniform { dim, .. } => *dim,
            NoiseModel::PointMass { value } => value.len(),
        }
    }

    /// Diameter of a ball containing the support.
    pub fn support_diameter(&self) -> f64 {
        match &self.model {
            NoiseModel::TruncatedGaussian { truncation, .. } => 2.0 * truncation * self.max_eigen.sqrt(),
            NoiseModel::PushforwardUniform { radius, .. } => 2.0 * radius * self.max_eigen.sqrt(),
            NoiseModel::PointMass { .. } => 0.0,
        }
    }

    /// Writes one draw into `out`.
    pub fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.model {
            NoiseModel::TruncatedGaussian { mean, truncation, .. } => {
                let k = mean.len();
                let mut z = vec![0.0; k];
                loop {
                    let mut r2 = 0.0;
                    for v in z.iter_mut() {
                        *v = rng.sample(StandardNormal);
                        r2 += *v * *v;
                    }
                    if r2 <= truncation * truncation {
                        break;
                    }
                }
                for (i, o) in out.iter_mut().enumerate() {
                    *o = mean[i] + (0..k).map(|j| self.root[(i, j)] * z[j]).sum::<f64>();
                }
            }
            NoiseModel::PushforwardUniform { indices, radius, exponent, .. } => {
                let w1: f64 = rng.random();
                let w2: f64 = rng.random();
                let r = radius * w1.powf(1.0 / exponent);
                let (s, c) = (std::f64::consts::TAU * w2).sin_cos();
                out.fill(0.0);
                out[indices[0]] = r * (self.root[(0, 0)] * c + self.root[(0, 1)] * s);
                out[indices[1]] = r * (self.root[(1, 0)] * c + self.root[(1, 1)] * s);
            }
            NoiseModel::PointMass { value } => out.copy_from_slice(value),
        }
    }
}

/// `count` draws, row-major.
pub fn sample_noise<R: Rng>(model: &NoiseModel, rng: &mut R, count: usize) -> Result<Vec<f64>> {
    let s = Sampler::new(model.clone())?;
    let k = s.dim();
    let mut out = vec![0.0; count * k];
    for row in out.chunks_exact_mut(k) {
        s.draw(rng, row);
    }
    Ok(out)
}

/// True distributions of the initial error and of the disturbance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub x0: NoiseModel,
    pub w: NoiseModel,
}

impl GroundTruth {
    pub fn samplers(&self, sys: &LinearSystem) -> Result<(Sampler, Sampler)> {
        let x0 = Sampler::new(self.x0.clone())?;
        let w = Sampler::new(self.w.clone())?;
        if x0.dim() != sys.n() || w.dim() != sys.d() {
            return Err(Error::Dimension(format!(
                "ground truth has dims ({}, {}), system needs ({}, {})",
                x0.dim(),
                w.dim(),
                sys.n(),
                sys.d()
            )));
        }
        Ok((x0, w))
    }

    pub fn support(&self, sys: &LinearSystem) -> Result<SupportSpec> {
        let (x0, w) = self.samplers(sys)?;
        SupportSpec::new(x0.support_diameter(), w.support_diameter())
    }
}

/// Random stream for work unit `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Errors at the anchor times plus the raw initial errors and first
/// disturbances of every trajectory (for moment estimation).
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorData {
    pub anchors: Vec<AnchorSamples>,
    pub initial: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Simulates trajectories `[start, start + count)` of the error dynamics.
/// Chunks with the same index always draw the same numbers.
pub fn generate_error_chunk(
    sys: &LinearSystem,
    law: &FeedbackLaw,
    gt: &GroundTruth,
    taus: &[usize],
    seed: u64,
    chunk: usize,
    count: usize,
) -> Result<ErrorData> {
    let a_cl = closed_loop_matrix(sys, law)?;
    let (x0, w) = gt.samplers(sys)?;
    let (n, d) = (sys.n(), sys.d());
    let horizon = taus.iter().copied().max().unwrap_or(0);
    let mut rng = stream_rng(seed, chunk as u64);
    let mut anchors: Vec<AnchorSamples> =
        taus.iter().map(|&tau| AnchorSamples { tau, dim: n, data: Vec::with_capacity(count * n) }).collect();
    let mut initial = Vec::with_capacity(count * n);
    let mut noise = Vec::with_capacity(count * d);
    let mut e = DVector::zeros(n);
    let mut wv = DVector::zeros(d);
    for _ in 0..count {
        x0.draw(&mut rng, e.as_mut_slice());
        initial.extend_from_slice(e.as_slice());
        for t in 0..=horizon {
            for a in anchors.iter_mut().filter(|a| a.tau == t) {
                a.data.extend_from_slice(e.as_slice());
            }
            if t == horizon {
                break;
            }
            w.draw(&mut rng, wv.as_mut_slice());
            if t == 0 {
                noise.extend_from_slice(wv.as_slice());
            }
            e = &a_cl * &e + sys.g() * &wv;
        }
        if horizon == 0 {
            w.draw(&mut rng, wv.as_mut_slice());
            noise.extend_from_slice(wv.as_slice());
        }
    }
    Ok(ErrorData { anchors, initial, noise })
}

/// All `count` trajectories, generated in parallel chunks and concatenated in
/// chunk order.
pub fn generate_error_data(
    sys: &LinearSystem,
    law: &FeedbackLaw,
    gt: &GroundTruth,
    count: usize,
    taus: &[usize],
    seed: u64,
) -> Result<ErrorData> {
    let chunks: Vec<(usize, usize)> =
        (0..count.div_ceil(CHUNK_SIZE)).map(|c| (c, CHUNK_SIZE.min(count - c * CHUNK_SIZE))).collect();
    let parts = chunks
        .par_iter()
        .map(|&(c, k)| generate_error_chunk(sys, law, gt, taus, seed, c, k))
        .collect::<Result<Vec<_>>>()?;
    let mut out = ErrorData {
        anchors: taus.iter().map(|&tau| AnchorSamples { tau, dim: sys.n(), data: Vec::new() }).collect(),
        initial: Vec::new(),
        noise: Vec::new(),
    };
    for part in parts {
        for (dst, src) in out.anchors.iter_mut().zip(part.anchors) {
            dst.data.extend(src.data);
        }
        out.initial.extend(part.initial);
        out.noise.extend(part.noise);
    }
    Ok(out)
}

/// Frequency with a Wilson 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub hits: u64,
    pub trials: u64,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Frequency {
    pub fn new(hits: u64, trials: u64) -> Self {
        let (lower, upper) = wilson_interval(hits, trials);
        let value = if trials == 0 { 0.0 } else { hits as f64 / trials as f64 };
        Self { hits, trials, value, lower, upper }
    }
}

pub fn wilson_interval(hits: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054;
    let n = trials as f64;
    let p = hits as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
    let lower = if hits == 0 { 0.0 } else { (center - half).max(0.0) };
    let upper = if hits == trials { 1.0 } else { (center + half).min(1.0) };
    (lower, upper)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rollouts: u64,
    /// Per time step `t = 0..=T`: fraction of rollouts inside an obstacle.
    pub collision: Vec<Frequency>,
    /// Per step `t = 0..T`: fraction whose applied input left `U`.
    pub control_violation: Vec<Frequency>,
    /// Rollouts that never collided nor violated the input set.
    pub trajectory_safe: Frequency,
    pub goal: Frequency,
    /// Certified per-step lower bound on the safe probability, when a
    /// checker context was supplied.
    pub certified_safe: Option<Vec<f64>>,
}

impl ValidationReport {
    pub fn max_collision(&self) -> f64 {
        self.collision.iter().map(|f| f.value).fold(0.0, f64::max)
    }
    pub fn max_control_violation(&self) -> f64 {
        self.control_violation.iter().map(|f| f.value).fold(0.0, f64::max)
    }
}

#[derive(Default)]
struct Tally {
    collision: Vec<u64>,
    control: Vec<u64>,
    safe: u64,
    goal: u64,
}

/// Rolls the closed loop out `rollouts` times under the true noise and scores
/// collisions, input violations and terminal goal attainment.
pub fn validate_plan(
    plan: &MotionPlan,
    sys: &LinearSystem,
    law: &FeedbackLaw,
    gt: &GroundTruth,
    env: &Environment,
    rollouts: usize,
    seed: u64,
    certify: Option<&CheckContext>,
) -> Result<ValidationReport> {
    if rollouts == 0 {
        return Err(Error::InvalidArgument("need at least one rollout".into()));
    }
    if plan.states.len() != plan.controls.len() + 1 {
        return Err(Error::Dimension("plan needs one more state than controls".into()));
    }
    env.validate()?;
    let (x0s, ws) = gt.samplers(sys)?;
    let horizon = plan.horizon();
    let a_cl = closed_loop_matrix(sys, law)?;
    let k = law.gain();
    // Feedforward term B (K x̄_t + ū_t) of the closed loop, per step.
    let drive: Vec<DVector<f64>> =
        (0..horizon).map(|t| sys.b() * (k * &plan.states[t] + &plan.controls[t])).collect();
    let pos = &env.position_indices;
    let chunks: Vec<(usize, usize)> =
        (0..rollouts.div_ceil(CHUNK_SIZE)).map(|c| (c, CHUNK_SIZE.min(rollouts - c * CHUNK_SIZE))).collect();
    let tallies: Vec<Tally> = chunks
        .par_iter()
        .map(|&(c, count)| {
            let mut rng = stream_rng(seed, c as u64);
            let mut tally =
                Tally { collision: vec![0; horizon + 1], control: vec![0; horizon], safe: 0, goal: 0 };
            let mut e0 = vec![0.0; sys.n()];
            let mut w = DVector::zeros(sys.d());
            let mut p = vec![0.0; pos.len()];
            for _ in 0..count {
                x0s.draw(&mut rng, &mut e0);
                let mut x = &plan.states[0] + DVector::from_column_slice(&e0);
                let mut ok = true;
                for t in 0..=horizon {
                    for (pi, &i) in p.iter_mut().zip(pos) {
                        *pi = x[i];
                    }
                    if env.obstacles.contains(&p) {
                        tally.collision[t] += 1;
                        ok = false;
                    }
                    if t == horizon {
                        if env.goal.contains(&p) {
                            tally.goal += 1;
                        }
                        break;
                    }
                    if let Some(u_set) = &env.control_set {
                        let u = &plan.controls[t] - k * (&x - &plan.states[t]);
                        if !u_set.contains(u.as_slice()) {
                            tally.control[t] += 1;
                            ok = false;
                        }
                    }
                    ws.draw(&mut rng, w.as_mut_slice());
                    x = &a_cl * &x + &drive[t] + sys.g() * &w;
                }
                tally.safe += u64::from(ok);
            }
            tally
        })
        .collect();
    let mut total = Tally { collision: vec![0; horizon + 1], control: vec![0; horizon], safe: 0, goal: 0 };
    for t in tallies {
        for (a, b) in total.collision.iter_mut().zip(&t.collision) {
            *a += b;
        }
        for (a, b) in total.control.iter_mut().zip(&t.control) {
            *a += b;
        }
        total.safe += t.safe;
        total.goal += t.goal;
    }
    let m = rollouts as u64;
    let certified_safe = match certify {
        None => None,
        Some(ctx) => Some(
            (0..=horizon)
                .map(|t| {
                    let node = NodeQuery {
                        t,
                        x_ref: plan.states[t].clone(),
                        // The terminal step keeps its incoming input, as in planning.
                        u_ff: plan
                            .controls
                            .get(t)
                            .or(plan.controls.last())
                            .cloned()
                            .unwrap_or_else(|| DVector::zeros(sys.m())),
                    };
                    let mut total = 1.0 - ctx.channels.len() as f64;
                    for ch in &ctx.channels {
                        total += crate::validity::channel_safe_probability(ch, &node)?;
                    }
                    Ok(total)
                })
                .collect::<Result<Vec<f64>>>()?,
        ),
    };
    Ok(ValidationReport {
        rollouts: m,
        collision: total.collision.iter().map(|&h| Frequency::new(h, m)).collect(),
        control_violation: total.control.iter().map(|&h| Frequency::new(h, m)).collect(),
        trajectory_safe: Frequency::new(total.safe, m),
        goal: Frequency::new(total.goal, m),
        certified_safe,
    })
}

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;
const ARCHIVE_MANIFEST: &str = "manifest.json";

/// Describes an on-disk sample archive: one packed little-endian `f64` block
/// per anchor plus blocks for the initial errors and first disturbances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format_version: u32,
    pub n: usize,
    pub d: usize,
    pub count: usize,
    pub seed: u64,
    pub taus: Vec<usize>,
}

impl ArchiveManifest {
    fn anchor_file(tau: usize) -> String {
        format!("anchor_{tau}.f64")
    }

    /// Block files in a fixed order, each with its row length.
    pub fn files(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = self.taus.iter().map(|&t| (Self::anchor_file(t), self.n)).collect();
        out.push(("initial.f64".into(), self.n));
        out.push(("noise.f64".into(), self.d));
        out
    }
}

/// Generates `count` trajectories and streams them into `dir`, a batch of
/// chunks at a time. The archive holds exactly what [`generate_error_data`]
/// returns for the same arguments.
pub fn write_error_archive(
    sys: &LinearSystem,
    law: &FeedbackLaw,
    gt: &GroundTruth,
    count: usize,
    taus: &[usize],
    seed: u64,
    dir: &Path,
) -> Result<ArchiveManifest> {
    if count == 0 {
        return Err(Error::EmptySamples);
    }
    let mut distinct = taus.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != taus.len() {
        return Err(Error::InvalidArgument("anchor times must be distinct".into()));
    }
    std::fs::create_dir_all(dir)?;
    let manifest = ArchiveManifest { format_version: ARCHIVE_FORMAT_VERSION, n: sys.n(), d: sys.d(), count, seed, taus: taus.to_vec() };
    let mut writers = manifest
        .files()
        .iter()
        .map(|(name, _)| Ok(BufWriter::new(File::create(dir.join(name))?)))
        .collect::<Result<Vec<_>>>()?;
    let chunks: Vec<(usize, usize)> =
        (0..count.div_ceil(CHUNK_SIZE)).map(|c| (c, CHUNK_SIZE.min(count - c * CHUNK_SIZE))).collect();
    let batch = 4 * rayon::current_num_threads().max(1);
    for group in chunks.chunks(batch) {
        let parts = group
            .par_iter()
            .map(|&(c, k)| generate_error_chunk(sys, law, gt, taus, seed, c, k))
            .collect::<Result<Vec<_>>>()?;
        for part in parts {
            let blocks = part.anchors.iter().map(|a| &a.data).chain([&part.initial, &part.noise]);
            for (w, block) in writers.iter_mut().zip(blocks) {
                for x in block {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    for mut w in writers {
        w.flush()?;
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(dir.join(ARCHIVE_MANIFEST), text)?;
    Ok(manifest)
}

/// Reads an archive written by [`write_error_archive`], checking every block
/// length against the manifest.
pub fn read_error_archive(dir: &Path) -> Result<(ArchiveManifest, ErrorData)> {
    let manifest_path = dir.join(ARCHIVE_MANIFEST);
    let corrupt = |path: &Path, reason: String| Error::CorruptFile { path: path.display().to_string(), reason };
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: ArchiveManifest = serde_json::from_str(&text).map_err(|e| corrupt(&manifest_path, e.to_string()))?;
    if manifest.format_version != ARCHIVE_FORMAT_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: ARCHIVE_FORMAT_VERSION });
    }
    let mut blocks = Vec::new();
    for (name, row) in manifest.files() {
        let path = dir.join(&name);
        let mut raw = Vec::new();
        File::open(&path)?.read_to_end(&mut raw)?;
        if raw.len() != manifest.count * row * 8 {
            return Err(corrupt(&path, format!("expected {} values, found {} bytes", manifest.count * row, raw.len())));
        }
        blocks.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect::<Vec<f64>>());
    }
    let noise = blocks.pop().expect("noise block");
    let initial = blocks.pop().expect("initial block");
    let anchors = manifest.taus.iter().zip(blocks).map(|(&tau, data)| AnchorSamples { tau, dim: manifest.n, data }).collect();
    Ok((manifest, ErrorData { anchors, initial, noise }))
}
