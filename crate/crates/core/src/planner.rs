//! Kinodynamic tree search over reference trajectories with chance-constrained
//! node validation, plus optional sparse (SST-style) witness pruning.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_in_ball, Environment, Primitive};
use crate::linsys::{reference_step, LinearSystem, MotionPlan};
use crate::validity::{CheckContext, CheckerKind, CheckerStats, NodeQuery, Validator};

/// Offset that separates the checker's random stream from the sampler's.
const CHECKER_STREAM: u64 = 0x5EED_C0DE;

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub state: DVector<f64>,
    pub t: usize,
    /// Feedforward input held on the incoming edge.
    pub control: Option<DVector<f64>>,
    pub duration: usize,
    /// False once an SST witness has been taken over by a cheaper node.
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub max_iterations: usize,
    /// Wall-clock limit in seconds; results then depend on machine speed.
    #[serde(default)]
    pub timeout_secs: Option<f64>,
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub control_lo: Vec<f64>,
    pub control_hi: Vec<f64>,
    #[serde(default = "default_durations")]
    pub durations: Vec<usize>,
    #[serde(default = "default_goal_bias")]
    pub goal_bias: f64,
    pub seed: u64,
    pub checker: CheckerKind,
    /// SST witness radius; 0 disables pruning.
    #[serde(default)]
    pub witness_radius: f64,
    /// Per-coordinate scale of the nearest-neighbour metric; `None` is plain
    /// Euclidean.
    #[serde(default)]
    pub metric_weights: Option<Vec<f64>>,
}

fn default_durations() -> Vec<usize> {
    (1..=5).collect()
}

fn default_goal_bias() -> f64 {
    0.05
}

impl PlannerConfig {
    pub fn new(state_lo: Vec<f64>, state_hi: Vec<f64>, control_lo: Vec<f64>, control_hi: Vec<f64>, checker: CheckerKind) -> Self {
        Self {
            max_iterations: 10_000,
            timeout_secs: None,
            state_lo,
            state_hi,
            control_lo,
            control_hi,
            durations: default_durations(),
            goal_bias: default_goal_bias(),
            seed: 0,
            checker,
            witness_radius: 0.0,
            metric_weights: None,
        }
    }

    pub fn validate(&self, sys: &LinearSystem) -> Result<()> {
        if self.max_iterations == 0 || self.timeout_secs.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("planning budget must be positive".into()));
        }
        if self.durations.is_empty() || self.durations.contains(&0) {
            return Err(Error::InvalidArgument("durations must be a nonempty set of positive steps".into()));
        }
        if !(0.0..1.0).contains(&self.goal_bias) {
            return Err(Error::InvalidArgument(format!("goal bias {} outside [0, 1)", self.goal_bias)));
        }
        if !(self.witness_radius >= 0.0) {
            return Err(Error::InvalidArgument("witness radius must be nonnegative".into()));
        }
        if let Some(w) = &self.metric_weights {
            if w.len() != sys.n() {
                return Err(Error::Dimension(format!("metric weights need {} entries", sys.n())));
            }
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidArgument("metric weights must be positive and finite".into()));
            }
        }
        for (what, lo, hi, n) in
            [("state", &self.state_lo, &self.state_hi, sys.n()), ("control", &self.control_lo, &self.control_hi, sys.m())]
        {
            if lo.len() != n || hi.len() != n {
                return Err(Error::Dimension(format!("{what} bounds need {n} entries")));
            }
            if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                return Err(Error::InvalidArgument(format!("{what} bounds must be finite with lo <= hi")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Solved,
    Timeout,
    /// The start node failed its own validity check.
    InvalidStart,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub iterations: u64,
    pub nodes: u64,
    pub active_nodes: u64,
    pub rejected_edges: u64,
    pub pruned: u64,
    pub checker: CheckerStats,
    /// Not part of any deterministic output.
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    pub status: PlanStatus,
    pub plan: Option<MotionPlan>,
    pub stats: PlanStats,
    pub tree: Tree,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn with_root(state: DVector<f64>) -> Self {
        Self { nodes: vec![TreeNode { id: 0, parent: None, state, t: 0, control: None, duration: 0, active: true }] }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn node(&self, id: usize) -> Result<&TreeNode> {
        self.nodes.get(id).ok_or(Error::DetachedNode(id))
    }

    pub fn add(&mut self, parent: usize, control: DVector<f64>, duration: usize, state: DVector<f64>) -> Result<usize> {
        let t = self.node(parent)?.t + duration;
        let id = self.nodes.len();
        self.nodes.push(TreeNode { id, parent: Some(parent), state, t, control: Some(control), duration, active: true });
        Ok(id)
    }

    /// Nearest active node by Euclidean distance; ties go to the lowest id.
    pub fn nearest(&self, query: &DVector<f64>) -> Option<usize> {
        self.nearest_weighted(query, None)
    }

    /// Nearest active node under `sum_i (w_i (a_i - b_i))^2`.
    pub fn nearest_weighted(&self, query: &DVector<f64>, weights: Option<&[f64]>) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for n in self.nodes.iter().filter(|n| n.active) {
            let d: f64 = match weights {
                None => n.state.iter().zip(query.iter()).map(|(a, b)| (a - b) * (a - b)).sum(),
                Some(w) => n.state.iter().zip(query.iter()).zip(w).map(|((a, b), w)| (w * (a - b)) * (w * (a - b))).sum(),
            };
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((n.id, d));
            }
        }
        best.map(|(id, _)| id)
    }

    /// Reference trajectory from the root to `id`, unrolled to unit steps.
    pub fn extract_path(&self, id: usize, sys: &LinearSystem) -> Result<MotionPlan> {
        let mut chain = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            let node = self.node(c)?;
            if chain.len() > self.nodes.len() {
                return Err(Error::DetachedNode(id));
            }
            chain.push(c);
            cur = node.parent;
        }
        if self.node(*chain.last().expect("nonempty chain"))?.parent.is_some() || chain.last() != Some(&0) {
            return Err(Error::DetachedNode(id));
        }
        chain.reverse();
        let mut states = vec![self.nodes[0].state.clone()];
        let mut controls = Vec::new();
        for &c in &chain[1..] {
            let node = &self.nodes[c];
            let u = node.control.clone().ok_or(Error::DetachedNode(c))?;
            let mut x = states.last().expect("root state").clone();
            for _ in 0..node.duration {
                x = reference_step(sys, &x, &u)?;
                states.push(x.clone());
                controls.push(u.clone());
            }
        }
        Ok(MotionPlan { states, controls })
    }
}

/// Draws `(x̄_rand, ū_rand, duration)`.
pub fn sample<R: Rng>(cfg: &PlannerConfig, env: &Environment, rng: &mut R) -> (DVector<f64>, DVector<f64>, usize) {
    let mut x = DVector::from_iterator(cfg.state_lo.len(), cfg.state_lo.iter().zip(&cfg.state_hi).map(|(l, h)| uniform(rng, *l, *h)));
    if cfg.goal_bias > 0.0 && rng.random::<f64>() < cfg.goal_bias {
        let p = sample_goal(rng, env);
        for (&i, v) in env.position_indices.iter().zip(p) {
            x[i] = v;
        }
    }
    let u = DVector::from_iterator(cfg.control_lo.len(), cfg.control_lo.iter().zip(&cfg.control_hi).map(|(l, h)| uniform(rng, *l, *h)));
    let duration = cfg.durations[rng.random_range(0..cfg.durations.len())];
    (x, u, duration)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// A workspace point in the goal region, by rejection inside the workspace
/// bounds when the region has no closed-form sampler.
fn sample_goal<R: Rng>(rng: &mut R, env: &Environment) -> Vec<f64> {
    let k = env.position_indices.len();
    match &env.goal {
        Primitive::Ball { center, radius } => {
            let mut out = vec![0.0; k];
            sample_in_ball(rng, center, *radius, &mut out);
            out
        }
        Primitive::Box { lo, hi } => lo.iter().zip(hi).map(|(l, h)| uniform(rng, *l, *h)).collect(),
        goal => {
            let draw = |rng: &mut R| -> Vec<f64> {
                env.bounds_lo.iter().zip(&env.bounds_hi).map(|(l, h)| uniform(rng, *l, *h)).collect()
            };
            for _ in 0..256 {
                let p = draw(rng);
                if goal.contains(&p) {
                    return p;
                }
            }
            draw(rng)
        }
    }
}

fn in_workspace(env: &Environment, x: &DVector<f64>) -> bool {
    env.position_indices.iter().enumerate().all(|(j, &i)| x[i] >= env.bounds_lo[j] && x[i] <= env.bounds_hi[j])
}

struct Witness {
    point: DVector<f64>,
    rep: usize,
}

/// Grows a tree from `x_init` until a node satisfies the goal check or the
/// budget runs out. Every unit step of every edge is validated, and the
/// terminal step of an edge is truncated to the first step that reaches the
/// goal.
pub fn plan(sys: &LinearSystem, ctx: CheckContext, env: &Environment, x_init: DVector<f64>, cfg: &PlannerConfig) -> Result<PlanResult> {
    cfg.validate(sys)?;
    env.validate()?;
    if x_init.len() != sys.n() {
        return Err(Error::Dimension(format!("start state has length {}, expected {}", x_init.len(), sys.n())));
    }
    let started = Instant::now();
    let deadline = cfg.timeout_secs.map(|s| started + Duration::from_secs_f64(s));
    let mut validator = Validator::new(ctx, cfg.checker, cfg.seed ^ CHECKER_STREAM)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tree = Tree::with_root(x_init.clone());
    let mut stats = PlanStats::default();
    let checks_control = env.control_set.is_some();
    let zero_u = DVector::zeros(sys.m());

    let finish = |status, plan, mut stats: PlanStats, tree: Tree, validator: &Validator| {
        stats.nodes = tree.len() as u64;
        stats.active_nodes = tree.nodes().iter().filter(|n| n.active).count() as u64;
        stats.checker = validator.stats().clone();
        stats.wall_time = started.elapsed();
        Ok(PlanResult { status, plan, stats, tree })
    };

    let root = NodeQuery { t: 0, x_ref: x_init.clone(), u_ff: zero_u.clone() };
    if !in_workspace(env, &x_init) || !validator.is_valid(&root)? {
        return finish(PlanStatus::InvalidStart, None, stats, tree, &validator);
    }
    if validator.is_goal(&root)? {
        let plan = tree.extract_path(0, sys)?;
        return finish(PlanStatus::Solved, Some(plan), stats, tree, &validator);
    }

    let sst = cfg.witness_radius > 0.0;
    let mut witnesses = vec![Witness { point: x_init, rep: 0 }];

    for _ in 0..cfg.max_iterations {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        stats.iterations += 1;
        let (x_rand, u, duration) = sample(cfg, env, &mut rng);
        let parent = tree.nearest_weighted(&x_rand, cfg.metric_weights.as_deref()).expect("tree has an active root");
        let (t0, x0) = {
            let p = tree.node(parent)?;
            (p.t, p.state.clone())
        };
        // The parent's state constraints already hold; only the input it now
        // applies is new.
        if checks_control && !validator.is_valid(&NodeQuery { t: t0, x_ref: x0.clone(), u_ff: u.clone() })? {
            stats.rejected_edges += 1;
            continue;
        }
        let mut x = x0;
        let mut reached = None;
        let mut ok = true;
        for k in 1..=duration {
            x = reference_step(sys, &x, &u)?;
            let q = NodeQuery { t: t0 + k, x_ref: x.clone(), u_ff: u.clone() };
            if !in_workspace(env, &x) || !validator.is_valid(&q)? {
                ok = false;
                break;
            }
            if validator.is_goal(&q)? {
                reached = Some(k);
                break;
            }
        }
        if !ok {
            stats.rejected_edges += 1;
            continue;
        }
        let steps = reached.unwrap_or(duration);
        if sst && reached.is_none() {
            let cost = t0 + steps;
            let near = witnesses
                .iter()
                .enumerate()
                .map(|(i, w)| (i, (&w.point - &x).norm()))
                .filter(|(_, d)| *d <= cfg.witness_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            match near {
                Some((wi, _)) => {
                    let rep = witnesses[wi].rep;
                    if tree.node(rep)?.t <= cost {
                        stats.pruned += 1;
                        continue;
                    }
                    let id = tree.add(parent, u, steps, x)?;
                    // Earlier representatives stay in the tree as ancestors
                    // but stop being expanded.
                    tree.nodes[rep].active = rep == 0;
                    witnesses[wi].rep = id;
                    stats.pruned += 1;
                    continue;
                }
                None => {
                    let id = tree.add(parent, u, steps, x.clone())?;
                    witnesses.push(Witness { point: x, rep: id });
                    continue;
                }
            }
        }
        let id = tree.add(parent, u, steps, x)?;
        if reached.is_some() {
            let plan = tree.extract_path(id, sys)?;
            return finish(PlanStatus::Solved, Some(plan), stats, tree, &validator);
        }
    }
    finish(PlanStatus::Timeout, None, stats, tree, &validator)
}

/// Re-runs the configured checker on every step of a plan, as the planner
/// queried it: step `t < T` with input `ū_t`, the terminal step with `ū_{T-1}`.
pub fn recheck_plan(validator: &mut Validator, plan: &MotionPlan, m: usize) -> Result<bool> {
    let horizon = plan.horizon();
    for t in 0..=horizon {
        let u = if t < horizon {
            plan.controls[t].clone()
        } else if horizon > 0 {
            plan.controls[horizon - 1].clone()
        } else {
            DVector::zeros(m)
        };
        if !validator.is_valid(&NodeQuery { t, x_ref: plan.states[t].clone(), u_ff: u })? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// CSV rows `id,parent,t,x0,x1,...`; the root's parent is `-1`.
pub fn tree_csv(tree: &Tree) -> String {
    let n = tree.nodes().first().map_or(0, |r| r.state.len());
    let mut out = String::from("id,parent,t");
    for i in 0..n {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for node in tree.nodes() {
        let parent = node.parent.map_or(-1, |p| p as i64);
        out.push_str(&format!("{},{},{}", node.id, parent, node.t));
        for v in node.state.iter() {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}
