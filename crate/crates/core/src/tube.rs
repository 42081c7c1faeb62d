//! Ambiguity tubes: Wasserstein balls around the tracking-error distribution
//! for every time step, learned at a few anchor times and propagated to the
//! rest through the closed-loop dynamics.
//!
//! For an anchor `τ` with data-driven radius `ε_τ` the derived radius at `t` is
//!
//! ```text
//! f_τ(t) = ε_τ + ‖M (A_cl^τ − A_cl^t)‖ M(P0) + M(Pw) Σ_{i=min(τ,t)}^{max(τ,t)−1} ‖M A_cl^i G‖
//! ```
//!
//! and the tube radius is the pointwise minimum over anchors, which gives the
//! characteristic sawtooth. `M` is the identity for a full-state tube and an
//! output map for a projected one.

use std::path::Path;

use nalgebra::DMatrix;
use parking_lot::RwLock;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{cluster, concentration_radius, moment_bound, ConcentrationParams, StandardRate, WeightedAtoms};
use crate::error::{Error, Result};
use crate::linsys::{closed_loop_matrix, from_rows, operator_norm, spectral_radius, to_rows, FeedbackLaw, LinearSystem, SupportSpec};
use crate::montecarlo::ErrorData;

pub const TUBE_FORMAT_VERSION: u32 = 1;
const MAX_TAIL_WINDOW: usize = 100_000;

/// Parameters shared by every anchor of a tube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub taus: Vec<usize>,
    /// Confidence budget for all anchors of this tube family.
    pub beta: f64,
    /// Number of tubes sharing `beta` (1 for a full-state tube).
    pub family_size: usize,
    /// Upper bounds on the first moments of the initial error and noise.
    pub moment_x0: f64,
    pub moment_w: f64,
    pub support: SupportSpec,
    pub t_max: usize,
    pub cluster_k: usize,
    pub q: u32,
    pub c_g: f64,
    pub seed: u64,
}

impl TubeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() {
            return Err(Error::InvalidArgument("need at least one anchor time".into()));
        }
        let mut sorted = self.taus.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.taus.len() {
            return Err(Error::InvalidArgument("anchor times must be distinct".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) || self.family_size == 0 {
            return Err(Error::InvalidArgument("beta must lie in (0,1) and the family be nonempty".into()));
        }
        if *sorted.last().expect("nonempty") > self.t_max {
            return Err(Error::InvalidArgument("horizon cap must cover every anchor".into()));
        }
        if !(self.moment_x0 >= 0.0 && self.moment_w >= 0.0) || self.cluster_k == 0 {
            return Err(Error::InvalidArgument("moments must be nonnegative and cluster_k positive".into()));
        }
        Ok(())
    }

    /// Confidence spent on each anchor.
    pub fn anchor_beta(&self) -> f64 {
        self.beta / (self.taus.len() * self.family_size) as f64
    }
}

/// Error samples recorded at one anchor time, rows of length `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSamples {
    pub tau: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl AnchorSamples {
    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub tau: usize,
    pub center: WeightedAtoms,
    /// `ε_τ`: concentration radius plus clustering cost.
    pub radius: f64,
    pub concentration: f64,
    pub cluster_cost: f64,
    pub samples: usize,
}

#[derive(Default)]
struct Cache {
    /// `M A_cl^t` for `t < len`.
    m_powers: Vec<DMatrix<f64>>,
    /// `A_cl^(len-1)`.
    last_power: Option<DMatrix<f64>>,
    /// `Σ_{i<t} ‖M A_cl^i G‖` for `t < len`.
    noise_prefix: Vec<f64>,
    /// `f_τj(t)` for every anchor, row per `t`.
    values: Vec<Vec<f64>>,
    /// Winning anchor index per `t`.
    winner: Vec<usize>,
}

/// A tube of 1-Wasserstein balls in the image of `M`.
pub struct AmbiguityTube {
    a_cl: DMatrix<f64>,
    g: DMatrix<f64>,
    m: DMatrix<f64>,
    m_norm: f64,
    moment_x0: f64,
    moment_w: f64,
    t_max: usize,
    anchors: Vec<Anchor>,
    cache: RwLock<Cache>,
}

impl std::fmt::Debug for AmbiguityTube {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AmbiguityTube")
            .field("dim", &self.dim())
            .field("taus", &self.anchors.iter().map(|a| a.tau).collect::<Vec<_>>())
            .field("t_max", &self.t_max)
            .finish()
    }
}

impl Clone for AmbiguityTube {
    fn clone(&self) -> Self {
        Self::assemble(
            self.a_cl.clone(),
            self.g.clone(),
            self.m.clone(),
            self.moment_x0,
            self.moment_w,
            self.t_max,
            self.anchors.clone(),
        )
    }
}

impl PartialEq for AmbiguityTube {
    fn eq(&self, other: &Self) -> bool {
        self.a_cl == other.a_cl
            && self.g == other.g
            && self.m == other.m
            && self.moment_x0.to_bits() == other.moment_x0.to_bits()
            && self.moment_w.to_bits() == other.moment_w.to_bits()
            && self.t_max == other.t_max
            && self.anchors == other.anchors
    }
}

/// Builds a tube from anchor samples. `projection` is `k x n`; pass the
/// identity for a full-state tube.
pub fn build_tube(
    samples: &[AnchorSamples],
    sys: &LinearSystem,
    law: &FeedbackLaw,
    spec: &TubeSpec,
    projection: &DMatrix<f64>,
) -> Result<AmbiguityTube> {
    spec.validate()?;
    let n = sys.n();
    if projection.ncols() != n || projection.nrows() == 0 {
        return Err(Error::Dimension(format!("projection must have {n} columns")));
    }
    let a_cl = closed_loop_matrix(sys, law)?;
    let rho = spectral_radius(&a_cl)?;
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    let mut taus = spec.taus.clone();
    taus.sort_unstable();
    let mut by_tau = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let s = samples
            .iter()
            .find(|s| s.tau == tau)
            .ok_or_else(|| Error::InsufficientSamples(format!("no samples at anchor {tau}")))?;
        if s.dim != n || s.data.len() % n != 0 {
            return Err(Error::Dimension(format!("anchor {tau} samples are not {n}-dimensional")));
        }
        if s.count() < 2 {
            return Err(Error::InsufficientSamples(format!("anchor {tau} has {} samples", s.count())));
        }
        by_tau.push(s);
    }

    let m_norm = operator_norm(projection);
    let k = projection.nrows();
    let beta_j = spec.anchor_beta();
    let params = ConcentrationParams::split(beta_j, spec.q, spec.c_g)?;
    let rate = StandardRate { c_g: spec.c_g };
    // Diameter bounds use the norm sequence up to the largest anchor.
    let tau_max = *taus.last().expect("validated nonempty");
    let seq = crate::linsys::norm_sequences(sys, law, tau_max)?;
    let anchors: Vec<Anchor> = by_tau
        .par_iter()
        .enumerate()
        .map(|(j, s)| -> Result<Anchor> {
            let projected = project_rows(&s.data, n, projection);
            let phi = m_norm
                * (seq.state[s.tau] * spec.support.diam_x0
                    + seq.noise[..s.tau].iter().sum::<f64>() * spec.support.diam_w);
            let concentration = concentration_radius(k, &projected, phi, &params, &rate)?;
            let empirical = WeightedAtoms::empirical(k, projected)?;
            let reduced = cluster(&empirical, spec.cluster_k, spec.seed.wrapping_add(j as u64))?;
            Ok(Anchor {
                tau: s.tau,
                center: reduced.atoms,
                radius: concentration + reduced.cost_bound,
                concentration,
                cluster_cost: reduced.cost_bound,
                samples: s.count(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AmbiguityTube::assemble(a_cl, sys.g().clone(), projection.clone(), spec.moment_x0, spec.moment_w, spec.t_max, anchors))
}

fn project_rows(data: &[f64], n: usize, m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    let mut out = Vec::with_capacity(data.len() / n * k);
    for row in data.chunks_exact(n) {
        for r in 0..k {
            out.push((0..n).map(|c| m[(r, c)] * row[c]).sum());
        }
    }
    out
}

impl AmbiguityTube {
    fn assemble(
        a_cl: DMatrix<f64>,
        g: DMatrix<f64>,
        m: DMatrix<f64>,
        moment_x0: f64,
        moment_w: f64,
        t_max: usize,
        anchors: Vec<Anchor>,
    ) -> Self {
        let m_norm = operator_norm(&m);
        let tube = Self { a_cl, g, m, m_norm, moment_x0, moment_w, t_max, anchors, cache: RwLock::new(Cache::default()) };
        tube.ensure(t_max);
        tube
    }

    /// Dimension of the tube's ambient space (rows of `M`).
    pub fn dim(&self) -> usize {
        self.m.nrows()
    }
    pub fn state_dim(&self) -> usize {
        self.m.ncols()
    }
    pub fn projection(&self) -> &DMatrix<f64> {
        &self.m
    }
    pub fn projection_norm(&self) -> f64 {
        self.m_norm
    }
    pub fn closed_loop(&self) -> &DMatrix<f64> {
        &self.a_cl
    }
    pub fn t_max(&self) -> usize {
        self.t_max
    }
    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }
    pub fn anchor(&self, j: usize) -> &Anchor {
        &self.anchors[j]
    }
    pub fn moments(&self) -> (f64, f64) {
        (self.moment_x0, self.moment_w)
    }

    fn anchor_index(&self, tau: usize) -> Result<usize> {
        self.anchors.iter().position(|a| a.tau == tau).ok_or(Error::UnknownAnchor(tau))
    }

    /// Grows the cached tables so they cover `t`.
    fn ensure(&self, t: usize) {
        if self.cache.read().winner.len() > t {
            return;
        }
        let mut c = self.cache.write();
        let have = c.winner.len();
        if have > t {
            return;
        }
        let target = (t + 1).max(2 * have);
        let n = self.a_cl.nrows();
        while c.m_powers.len() < target {
            let next = match &c.last_power {
                None => DMatrix::identity(n, n),
                Some(p) => &self.a_cl * p,
            };
            let prefix = match c.noise_prefix.last() {
                None => 0.0,
                Some(&s) => s + operator_norm(&(&c.m_powers[c.m_powers.len() - 1] * &self.g)),
            };
            c.noise_prefix.push(prefix);
            c.m_powers.push(&self.m * &next);
            c.last_power = Some(next);
        }
        for s in have..target {
            let row: Vec<f64> = self
                .anchors
                .iter()
                .map(|a| {
                    let gap = operator_norm(&(&c.m_powers[a.tau] - &c.m_powers[s]));
                    a.radius + gap * self.moment_x0 + self.moment_w * (c.noise_prefix[s] - c.noise_prefix[a.tau]).abs()
                })
                .collect();
            c.values.push(row);
        }
        // `‖M (A^τ - A^t)‖` oscillates when `A_cl` has complex modes. A running
        // maximum away from each anchor keeps the bound and makes both arms
        // nondecreasing. The first fill covers every anchor time, so the arms
        // before an anchor are complete here.
        for (j, a) in self.anchors.iter().enumerate() {
            for s in (have.max(a.tau + 1))..target {
                c.values[s][j] = c.values[s][j].max(c.values[s - 1][j]);
            }
            if have == 0 {
                for s in (0..a.tau.min(target)).rev() {
                    c.values[s][j] = c.values[s][j].max(c.values[s + 1][j]);
                }
            }
        }
        for s in have..target {
            let row = &c.values[s];
            // An anchor time keeps its own data-driven set even when another
            // anchor's derived radius happens to be smaller there.
            let best = self.anchors.iter().position(|a| a.tau == s).unwrap_or_else(|| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v < row[best] {
                        best = j;
                    }
                }
                best
            });
            c.winner.push(best);
        }
    }

    /// Derived radius of anchor `tau` at time `t`: the running maximum of
    /// the ambiguity-dynamics bound between `tau` and `t`.
    pub fn f_tau(&self, tau: usize, t: usize) -> Result<f64> {
        let j = self.anchor_index(tau)?;
        self.ensure(t);
        Ok(self.cache.read().values[t][j])
    }

    /// Winning anchor index and tube radius `ε_t`. At an anchor time this is
    /// the anchor itself; elsewhere the smallest derived radius, ties going
    /// to the earliest anchor.
    pub fn radius_at(&self, t: usize) -> (usize, f64) {
        self.ensure(t);
        let c = self.cache.read();
        let j = c.winner[t];
        (j, c.values[t][j])
    }

    /// Center and radius of the ambiguity set at `t`.
    pub fn ball_at(&self, t: usize) -> (&WeightedAtoms, f64) {
        let (j, eps) = self.radius_at(t);
        (&self.anchors[j].center, eps)
    }

    /// Anchor whose region contains every `t >= t_max`.
    pub fn last_region(&self) -> usize {
        self.radius_at(self.t_max).0
    }

    /// Region (anchor index) used for `t`; times past `t_max` share the last region.
    pub fn region_of(&self, t: usize) -> usize {
        if t >= self.t_max {
            self.last_region()
        } else {
            self.radius_at(t).0
        }
    }

    /// `ε̄_j`: the largest radius anchor `j` is responsible for. The last
    /// region is unbounded in time, so its value includes a tail bound valid
    /// for every `t >= t_max`.
    pub fn sup_radius_by_anchor(&self, j: usize) -> f64 {
        self.ensure(self.t_max);
        let c = self.cache.read();
        let mut sup = self.anchors[j].radius;
        for t in 0..self.t_max {
            if c.winner[t] == j {
                sup = sup.max(c.values[t][j]);
            }
        }
        let at_horizon = c.values[self.t_max][j];
        drop(c);
        if j == self.last_region() {
            // Past `t_max` the envelope is the larger of its value at `t_max`
            // and the raw radius, which the tail bound covers.
            sup = sup.max(at_horizon).max(self.tail_bound(j));
        }
        sup
    }

    /// Upper bound on the raw `f_τj(t)` over all `t >= t_max`.
    fn tail_bound(&self, j: usize) -> f64 {
        let tau = self.anchors[j].tau;
        let (window, contraction) = contraction_window(&self.a_cl);
        let big_t = self.t_max;
        self.ensure(big_t + window);
        let c = self.cache.read();
        let max_m = (0..window).map(|r| operator_norm(&c.m_powers[big_t + r])).fold(0.0, f64::max);
        let sum_m: f64 = (0..window).map(|r| operator_norm(&c.m_powers[big_t + r])).sum();
        let g_norm = operator_norm(&self.g);
        let noise_tail = sum_m * g_norm / (1.0 - contraction);
        let head = operator_norm(&c.m_powers[tau]);
        self.anchors[j].radius
            + (head + max_m) * self.moment_x0
            + self.moment_w * (c.noise_prefix[big_t] - c.noise_prefix[tau] + noise_tail)
    }

    /// `(t, anchor τ, ε_t)` rows for `t = 0..=t_end`.
    pub fn radius_table(&self, t_end: usize) -> Vec<(usize, usize, f64)> {
        (0..=t_end)
            .map(|t| {
                let (j, e) = self.radius_at(t);
                (t, self.anchors[j].tau, e)
            })
            .collect()
    }

    pub fn to_file(&self) -> TubeFile {
        TubeFile {
            format_version: TUBE_FORMAT_VERSION,
            a_cl: to_rows(&self.a_cl),
            g: to_rows(&self.g),
            projection: to_rows(&self.m),
            moment_x0: self.moment_x0,
            moment_w: self.moment_w,
            t_max: self.t_max,
            anchors: self.anchors.clone(),
        }
    }

    pub fn from_file(file: TubeFile) -> Result<Self> {
        if file.format_version != TUBE_FORMAT_VERSION {
            return Err(Error::Version { found: file.format_version, expected: TUBE_FORMAT_VERSION });
        }
        let a_cl = from_rows(&file.a_cl)?;
        let g = from_rows(&file.g)?;
        let m = from_rows(&file.projection)?;
        let n = a_cl.nrows();
        if n == 0 || a_cl.ncols() != n || g.nrows() != n || m.ncols() != n || m.nrows() == 0 {
            return Err(Error::Dimension("tube matrices are inconsistent".into()));
        }
        if file.anchors.is_empty() || file.anchors.iter().any(|a| a.center.dim() != m.nrows() || a.tau > file.t_max) {
            return Err(Error::Dimension("tube anchors do not match the projection".into()));
        }
        Ok(Self::assemble(a_cl, g, m, file.moment_x0, file.moment_w, file.t_max, file.anchors))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_file()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: TubeFile = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptFile { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_file(file)
    }

    /// Loads a tube and checks it belongs to a system of state dimension `n`
    /// with disturbance dimension `d`.
    pub fn load_for(path: &Path, n: usize, d: usize) -> Result<Self> {
        let tube = Self::load(path)?;
        if tube.state_dim() != n || tube.g.ncols() != d {
            return Err(Error::Dimension(format!(
                "tube is for n={}, d={} but the system has n={n}, d={d}",
                tube.state_dim(),
                tube.g.ncols()
            )));
        }
        Ok(tube)
    }
}

/// Serialized tube; matrices as nested rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TubeFile {
    pub format_version: u32,
    pub a_cl: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub projection: Vec<Vec<f64>>,
    pub moment_x0: f64,
    pub moment_w: f64,
    pub t_max: usize,
    pub anchors: Vec<Anchor>,
}

/// Smallest `W` with `‖A^W‖ < 1` and that norm.
fn contraction_window(a: &DMatrix<f64>) -> (usize, f64) {
    let mut p = a.clone();
    for w in 1..=MAX_TAIL_WINDOW {
        let q = operator_norm(&p);
        if q < 1.0 {
            return (w, q);
        }
        p = a * &p;
    }
    // Unreachable for the stable matrices accepted by `build_tube`.
    (MAX_TAIL_WINDOW, 1.0 - f64::EPSILON)
}

/// A family of projected tubes sharing anchors and confidence budget.
#[derive(Clone, Debug, PartialEq)]
pub struct LowDimFamily {
    pub tubes: Vec<AmbiguityTube>,
}

/// Builds one tube per projection; each anchor gets `β / (J L)`.
pub fn build_family(
    samples: &[AnchorSamples],
    sys: &LinearSystem,
    law: &FeedbackLaw,
    spec: &TubeSpec,
    projections: &[DMatrix<f64>],
) -> Result<LowDimFamily> {
    let mut spec = spec.clone();
    spec.family_size = projections.len();
    let tubes = projections.iter().map(|m| build_tube(samples, sys, law, &spec, m)).collect::<Result<_>>()?;
    Ok(LowDimFamily { tubes })
}

/// Learns one tube per projection from raw trajectory data. The first
/// moments of the initial error and the disturbance are bounded from the
/// data too, so the confidence `spec.beta` is split evenly over `J L + 2`
/// events. The moment fields of `spec` are ignored.
pub fn learn_family(
    data: &ErrorData,
    sys: &LinearSystem,
    law: &FeedbackLaw,
    spec: &TubeSpec,
    projections: &[DMatrix<f64>],
) -> Result<LowDimFamily> {
    if projections.is_empty() {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    spec.validate()?;
    let events = (spec.taus.len() * projections.len() + 2) as f64;
    let per_event = spec.beta / events;
    let norms = |v: &[f64], k: usize| -> Vec<f64> { v.chunks_exact(k).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect() };
    let mut spec = spec.clone();
    spec.moment_x0 = moment_bound(&norms(&data.initial, sys.n()), spec.support.diam_x0, per_event, 1)?;
    spec.moment_w = moment_bound(&norms(&data.noise, sys.d()), spec.support.diam_w, per_event, 1)?;
    spec.beta = per_event * (spec.taus.len() * projections.len()) as f64;
    build_family(&data.anchors, sys, law, &spec, projections)
}

/// Greedy anchor selection. Starts from `horizon` and adds the anchor that
/// lowers `max_t ε_t` over `t <= t_grid` the most, with anchor radii
/// approximated by `proxy(τ)`. Ties favour the earlier time.
pub fn select_taus(
    horizon: usize,
    count: usize,
    sys: &LinearSystem,
    law: &FeedbackLaw,
    moments: (f64, f64),
    t_grid: usize,
    proxy: &dyn Fn(usize) -> f64,
) -> Result<Vec<usize>> {
    if count == 0 || count > horizon + 1 {
        return Err(Error::InvalidArgument(format!("cannot pick {count} anchors from 0..={horizon}")));
    }
    let a_cl = closed_loop_matrix(sys, law)?;
    let end = t_grid.max(horizon);
    let n = sys.n();
    let mut powers = Vec::with_capacity(end + 1);
    let mut prefix = vec![0.0];
    let mut p = DMatrix::<f64>::identity(n, n);
    for t in 0..=end {
        if t > 0 {
            prefix.push(prefix[t - 1] + operator_norm(&(&powers[t - 1] * sys.g())));
        }
        powers.push(p.clone());
        p = &a_cl * &p;
    }
    let f = |tau: usize, t: usize| {
        proxy(tau)
            + operator_norm(&(&powers[tau] - &powers[t])) * moments.0
            + moments.1 * (prefix[t] - prefix[tau]).abs()
    };
    let arm: Vec<Vec<f64>> = (0..=horizon).map(|tau| (0..=end).map(|t| f(tau, t)).collect()).collect();
    let mut chosen = vec![horizon];
    let mut envelope = arm[horizon].clone();
    while chosen.len() < count {
        let mut best: Option<(usize, f64)> = None;
        for tau in 0..=horizon {
            if chosen.contains(&tau) {
                continue;
            }
            let sup = envelope.iter().zip(&arm[tau]).map(|(a, b)| a.min(*b)).fold(f64::NEG_INFINITY, f64::max);
            if best.is_none_or(|(_, s)| sup < s) {
                best = Some((tau, sup));
            }
        }
        let (tau, _) = best.expect("candidates remain");
        for (e, v) in envelope.iter_mut().zip(&arm[tau]) {
            *e = e.min(*v);
        }
        chosen.push(tau);
    }
    chosen.sort_unstable();
    Ok(chosen)
}
