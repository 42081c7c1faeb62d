//! Validity checking of tree nodes against ambiguity and confidence tubes.
//!
//! A check runs over one or more *channels*. Each channel owns a tube for a
//! linear image `M_l e` of the tracking error, the obstacles expressed in that
//! image space and, optionally, the goal. A full-state layout has one channel
//! with `M = I`; a projected layout has a workspace channel and, when the
//! control budget is enforced, a control channel with `M = -K`.
//!
//! Obstacles may be given in a space reached through a further linear map
//! (the workspace selection, or `-K` for the control set). Distances are then
//! measured there and divided by the map's norm, a lower bound on the true
//! distance that keeps every checker sound.

pub mod bandit;
pub mod confidence;
pub mod worst_case;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bandit::BanditState;
pub use confidence::{build_confidence_tube, confidence_radius, worst_case_mass_in_ball, ConfidenceTube};
pub use worst_case::{greedy_remaining_mass, worst_case_prob_inside, worst_case_prob_outside};

use crate::error::{Error, Result};
use crate::geometry::{control_obstacle, volume_fraction, ComplementSet, ControlConstraint, Environment, Primitive, SetExpr};
use crate::linsys::{operator_norm, FeedbackLaw};
use crate::tube::AmbiguityTube;

/// Default Monte Carlo sample count for overlap-volume estimates.
pub const DEFAULT_N_MC: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub enum BlockSet {
    Static(SetExpr),
    /// `R^m \ (U - ū - K x̄)`, rebuilt for every node.
    Control(ControlConstraint),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleBlock {
    map: Option<DMatrix<f64>>,
    inv_norm: f64,
    set: BlockSet,
}

impl ObstacleBlock {
    pub fn direct(set: BlockSet) -> Self {
        Self { map: None, inv_norm: 1.0, set }
    }

    pub fn mapped(map: DMatrix<f64>, set: BlockSet) -> Self {
        let norm = operator_norm(&map);
        let inv_norm = if norm > 0.0 { 1.0 / norm } else { f64::INFINITY };
        Self { map: Some(map), inv_norm, set }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalBlock {
    map: Option<DMatrix<f64>>,
    inv_norm: f64,
    set: Primitive,
}

impl GoalBlock {
    pub fn direct(set: Primitive) -> Self {
        Self { map: None, inv_norm: 1.0, set }
    }

    pub fn mapped(map: DMatrix<f64>, set: Primitive) -> Self {
        let norm = operator_norm(&map);
        Self { map: Some(map), inv_norm: if norm > 0.0 { 1.0 / norm } else { f64::INFINITY }, set }
    }
}

#[derive(Clone, Debug)]
pub struct Channel {
    pub tube: Arc<AmbiguityTube>,
    pub confidence: Option<ConfidenceTube>,
    pub obstacles: Vec<ObstacleBlock>,
    pub goal: Option<GoalBlock>,
}

/// A node to check: time index, reference state and feedforward input.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeQuery {
    pub t: usize,
    pub x_ref: DVector<f64>,
    pub u_ff: DVector<f64>,
}

/// Everything a checker needs besides mutable bandit state.
#[derive(Clone, Debug)]
pub struct CheckContext {
    pub channels: Vec<Channel>,
    /// Required lower bound on every chance constraint.
    pub p_safe: f64,
    pub n_mc: usize,
}

impl CheckContext {
    pub fn new(channels: Vec<Channel>, p_safe: f64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidArgument("need at least one channel".into()));
        }
        if !(p_safe > 0.0 && p_safe < 1.0) {
            return Err(Error::InvalidArgument(format!("p_safe {p_safe} must lie in (0,1)")));
        }
        Ok(Self { channels, p_safe, n_mc: DEFAULT_N_MC })
    }

    /// Target each confidence tube must exceed so that all `L` balls hold
    /// jointly with probability above `p_safe`.
    pub fn confidence_target(&self) -> f64 {
        1.0 - (1.0 - self.p_safe) / self.channels.len() as f64
    }
}

enum ResolvedSet<'a> {
    Static(&'a SetExpr),
    Complement(ComplementSet),
}

struct ResolvedBlock<'a> {
    map: Option<&'a DMatrix<f64>>,
    inv_norm: f64,
    set: ResolvedSet<'a>,
}

/// Obstacles of one channel instantiated for one node, with the node shift.
struct Resolved<'a> {
    shift: DVector<f64>,
    blocks: Vec<ResolvedBlock<'a>>,
}

impl Resolved<'_> {
    fn dist(&self, y: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for b in &self.blocks {
            let d = match b.map {
                None => set_dist(&b.set, y),
                Some(m) => {
                    let z = m * DVector::from_column_slice(y);
                    set_dist(&b.set, z.as_slice())
                }
            };
            best = best.min(d * b.inv_norm);
        }
        best
    }
}

fn set_dist(s: &ResolvedSet<'_>, y: &[f64]) -> f64 {
    match s {
        ResolvedSet::Static(e) => e.dist(y),
        ResolvedSet::Complement(c) => c.dist(y),
    }
}

fn resolve<'a>(ch: &'a Channel, node: &NodeQuery) -> Result<Resolved<'a>> {
    let m = ch.tube.projection();
    if node.x_ref.len() != m.ncols() {
        return Err(Error::Dimension(format!("node state has length {}, tube expects {}", node.x_ref.len(), m.ncols())));
    }
    let shift = m * &node.x_ref;
    let mut blocks = Vec::with_capacity(ch.obstacles.len());
    for b in &ch.obstacles {
        let set = match &b.set {
            BlockSet::Static(s) => ResolvedSet::Static(s),
            BlockSet::Control(cc) => ResolvedSet::Complement(control_obstacle(cc, &node.x_ref, &node.u_ff)?),
        };
        blocks.push(ResolvedBlock { map: b.map.as_ref(), inv_norm: b.inv_norm, set });
    }
    Ok(Resolved { shift, blocks })
}

fn shifted(point: &[f64], shift: &DVector<f64>) -> Vec<f64> {
    point.iter().zip(shift.iter()).map(|(a, b)| a + b).collect()
}

fn goal_depth(g: &GoalBlock, y: &[f64]) -> f64 {
    let d = match &g.map {
        None => g.set.depth(y),
        Some(m) => g.set.depth((m * DVector::from_column_slice(y)).as_slice()),
    };
    d * g.inv_norm
}

/// Worst-case probability that the channel's image avoids its obstacles.
pub fn channel_safe_probability(ch: &Channel, node: &NodeQuery) -> Result<f64> {
    let r = resolve(ch, node)?;
    let (center, eps) = ch.tube.ball_at(node.t);
    let atoms = center.iter().map(|(x, w)| (w, r.dist(&shifted(x, &r.shift)))).collect();
    Ok(greedy_remaining_mass(atoms, eps))
}

/// Worst-case probability that the channel's image lies in its goal.
pub fn channel_goal_probability(ch: &Channel, node: &NodeQuery) -> Result<Option<f64>> {
    let Some(goal) = &ch.goal else { return Ok(None) };
    let shift = ch.tube.projection() * &node.x_ref;
    let (center, eps) = ch.tube.ball_at(node.t);
    let atoms = center.iter().map(|(x, w)| (w, goal_depth(goal, &shifted(x, &shift)))).collect();
    Ok(Some(greedy_remaining_mass(atoms, eps)))
}

/// Exact check: `1 - L + Σ α_l > p_safe`.
pub fn check_exact(ctx: &CheckContext, node: &NodeQuery) -> Result<bool> {
    let mut total = 1.0 - ctx.channels.len() as f64;
    for ch in &ctx.channels {
        total += channel_safe_probability(ch, node)?;
    }
    Ok(total > ctx.p_safe)
}

fn confidence_of(ch: &Channel) -> Result<&ConfidenceTube> {
    ch.confidence.as_ref().ok_or_else(|| Error::InvalidArgument("lazy checking needs a confidence tube".into()))
}

/// Lazy check: every channel's confidence ball around `M_l x̄_t` misses its obstacles.
pub fn check_lazy(ctx: &CheckContext, node: &NodeQuery) -> Result<bool> {
    for ch in &ctx.channels {
        let radius = confidence_of(ch)?.radius_for(node.t);
        let r = resolve(ch, node)?;
        if r.dist(r.shift.as_slice()) < radius {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Lazy first, exact on failure. Returns the verdict and whether the exact
/// check ran.
pub fn check_hybrid(ctx: &CheckContext, node: &NodeQuery) -> Result<(bool, bool)> {
    if check_lazy(ctx, node)? {
        return Ok((true, false));
    }
    Ok((check_exact(ctx, node)?, true))
}

/// Largest fraction, over channels, of the confidence ball that overlaps an obstacle.
pub fn overlap_volume_ratio(ctx: &CheckContext, node: &NodeQuery, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (l, ch) in ctx.channels.iter().enumerate() {
        let radius = confidence_of(ch)?.radius_for(node.t);
        let r = resolve(ch, node)?;
        let v = if radius <= 0.0 {
            if r.dist(r.shift.as_slice()) == 0.0 { 1.0 } else { 0.0 }
        } else {
            volume_fraction(r.shift.as_slice(), radius, ctx.n_mc, seed.wrapping_add(l as u64), |y| r.dist(y) == 0.0)
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// Outcome of a bandit-gated check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BanditOutcome {
    pub valid: bool,
    pub lazy_valid: bool,
    pub exact_called: bool,
}

/// Lazy first; on failure a Thompson-sampled arm decides whether the exact
/// check is attempted, and its verdict updates the arm.
pub fn check_bandit(ctx: &CheckContext, node: &NodeQuery, state: &mut BanditState, rng: &mut ChaCha8Rng) -> Result<BanditOutcome> {
    if check_lazy(ctx, node)? {
        return Ok(BanditOutcome { valid: true, lazy_valid: true, exact_called: false });
    }
    let ratio = overlap_volume_ratio(ctx, node, rng.next_u64())?;
    let bin = state.bin(ratio);
    if !state.should_check(bin, rng) {
        return Ok(BanditOutcome { valid: false, lazy_valid: false, exact_called: false });
    }
    let exact = check_exact(ctx, node)?;
    state.record(bin, exact);
    Ok(BanditOutcome { valid: exact, lazy_valid: false, exact_called: true })
}

/// Exact goal check over the channels that carry a goal.
pub fn goal_exact(ctx: &CheckContext, node: &NodeQuery) -> Result<bool> {
    let mut count = 0usize;
    let mut total = 0.0;
    for ch in &ctx.channels {
        if let Some(p) = channel_goal_probability(ch, node)? {
            count += 1;
            total += p;
        }
    }
    Ok(count > 0 && 1.0 - count as f64 + total > ctx.p_safe)
}

/// Lazy goal check: every goal channel's confidence ball fits in the goal.
pub fn goal_lazy(ctx: &CheckContext, node: &NodeQuery) -> Result<bool> {
    let mut any = false;
    for ch in &ctx.channels {
        if let Some(goal) = &ch.goal {
            any = true;
            let radius = confidence_of(ch)?.radius_for(node.t);
            let center = ch.tube.projection() * &node.x_ref;
            if goal_depth(goal, center.as_slice()) < radius {
                return Ok(false);
            }
        }
    }
    Ok(any)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckerKind {
    Exact,
    Lazy,
    Hybrid,
    Bandit,
}

impl CheckerKind {
    pub fn needs_confidence(self) -> bool {
        !matches!(self, CheckerKind::Exact)
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckerKind::Exact => "exact",
            CheckerKind::Lazy => "lazy",
            CheckerKind::Hybrid => "hybrid",
            CheckerKind::Bandit => "bandit",
        }
    }
}

impl std::str::FromStr for CheckerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "lazy" => Ok(Self::Lazy),
            "hybrid" => Ok(Self::Hybrid),
            "bandit" => Ok(Self::Bandit),
            other => Err(Error::InvalidArgument(format!("unknown checker {other}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckerStats {
    pub validity_queries: u64,
    pub goal_queries: u64,
    pub lazy_calls: u64,
    pub exact_calls: u64,
    pub volume_estimates: u64,
}

/// A checker with its own bandit state and random stream; one per planner.
pub struct Validator {
    ctx: CheckContext,
    kind: CheckerKind,
    bandit: BanditState,
    rng: ChaCha8Rng,
    stats: CheckerStats,
}

impl Validator {
    pub fn new(ctx: CheckContext, kind: CheckerKind, seed: u64) -> Result<Self> {
        if kind.needs_confidence() && ctx.channels.iter().any(|c| c.confidence.is_none()) {
            return Err(Error::InvalidArgument(format!("{} checking needs confidence tubes", kind.name())));
        }
        Ok(Self { ctx, kind, bandit: BanditState::default(), rng: ChaCha8Rng::seed_from_u64(seed), stats: CheckerStats::default() })
    }

    pub fn context(&self) -> &CheckContext {
        &self.ctx
    }
    pub fn kind(&self) -> CheckerKind {
        self.kind
    }
    pub fn stats(&self) -> &CheckerStats {
        &self.stats
    }
    pub fn bandit(&self) -> &BanditState {
        &self.bandit
    }

    pub fn is_valid(&mut self, node: &NodeQuery) -> Result<bool> {
        self.stats.validity_queries += 1;
        match self.kind {
            CheckerKind::Exact => {
                self.stats.exact_calls += 1;
                check_exact(&self.ctx, node)
            }
            CheckerKind::Lazy => {
                self.stats.lazy_calls += 1;
                check_lazy(&self.ctx, node)
            }
            CheckerKind::Hybrid => {
                self.stats.lazy_calls += 1;
                let (ok, exact) = check_hybrid(&self.ctx, node)?;
                self.stats.exact_calls += u64::from(exact);
                Ok(ok)
            }
            CheckerKind::Bandit => {
                self.stats.lazy_calls += 1;
                let out = check_bandit(&self.ctx, node, &mut self.bandit, &mut self.rng)?;
                self.stats.volume_estimates += u64::from(!out.lazy_valid);
                self.stats.exact_calls += u64::from(out.exact_called);
                Ok(out.valid)
            }
        }
    }

    /// Goal test matching the checker: exact, lazy, or lazy-then-exact.
    pub fn is_goal(&mut self, node: &NodeQuery) -> Result<bool> {
        self.stats.goal_queries += 1;
        match self.kind {
            CheckerKind::Exact => goal_exact(&self.ctx, node),
            CheckerKind::Lazy => goal_lazy(&self.ctx, node),
            CheckerKind::Hybrid | CheckerKind::Bandit => Ok(goal_lazy(&self.ctx, node)? || goal_exact(&self.ctx, node)?),
        }
    }
}

/// One channel over the full error state: obstacles and goal are pulled back
/// through the workspace selection, the control set through `-K`.
pub fn full_layout(
    tube: Arc<AmbiguityTube>,
    confidence: Option<ConfidenceTube>,
    env: &Environment,
    law: &FeedbackLaw,
) -> Result<Vec<Channel>> {
    env.validate()?;
    let n = tube.state_dim();
    if tube.projection() != &DMatrix::<f64>::identity(n, n) {
        return Err(Error::InvalidArgument("full layout needs a full-state tube".into()));
    }
    let p = env.position_map(n)?;
    let mut obstacles = Vec::new();
    if !env.obstacles.is_empty() {
        obstacles.push(ObstacleBlock::mapped(p.clone(), BlockSet::Static(env.obstacles.clone())));
    }
    if let Some(u) = &env.control_set {
        let cc = ControlConstraint::new(u.clone(), law.gain().clone())?;
        obstacles.push(ObstacleBlock::mapped(-law.gain().clone(), BlockSet::Control(cc)));
    }
    let goal = Some(GoalBlock::mapped(p, env.goal.clone()));
    Ok(vec![Channel { tube, confidence, obstacles, goal }])
}

/// Workspace channel (`M_1` = position selection) and, if the environment
/// has a control set, a control channel (`M_2 = -K`).
pub fn projected_layout(
    workspace: (Arc<AmbiguityTube>, Option<ConfidenceTube>),
    control: Option<(Arc<AmbiguityTube>, Option<ConfidenceTube>)>,
    env: &Environment,
    law: &FeedbackLaw,
) -> Result<Vec<Channel>> {
    env.validate()?;
    let n = workspace.0.state_dim();
    let p = env.position_map(n)?;
    if workspace.0.projection() != &p {
        return Err(Error::InvalidArgument("workspace tube must project onto the position coordinates".into()));
    }
    let mut obstacles = Vec::new();
    if !env.obstacles.is_empty() {
        obstacles.push(ObstacleBlock::direct(BlockSet::Static(env.obstacles.clone())));
    }
    let mut channels = vec![Channel {
        tube: workspace.0,
        confidence: workspace.1,
        obstacles,
        goal: Some(GoalBlock::direct(env.goal.clone())),
    }];
    match (&env.control_set, control) {
        (Some(u), Some((tube, confidence))) => {
            let minus_k = -law.gain().clone();
            if (tube.projection() - &minus_k).amax() > 1e-12 {
                return Err(Error::InvalidArgument("control tube must project through -K".into()));
            }
            let cc = ControlConstraint::new(u.clone(), law.gain().clone())?;
            channels.push(Channel {
                tube,
                confidence,
                obstacles: vec![ObstacleBlock::direct(BlockSet::Control(cc))],
                goal: None,
            });
        }
        (Some(_), None) => return Err(Error::InvalidArgument("control set given but no control tube".into())),
        (None, _) => {}
    }
    Ok(channels)
}
