//! Obstacle, goal and control-constraint sets with closed-form distance
//! queries, plus seeded generators for benchmark workspaces.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A convex primitive in `R^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Axis-aligned box `[lo, hi]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// Convex polygon in the plane with counter-clockwise vertices.
    Polygon { vertices: Vec<[f64; 2]> },
    /// `{x : normal . x <= offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
}

impl Primitive {
    pub fn aabb(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let p = Primitive::Box { lo, hi };
        p.validate()?;
        Ok(p)
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let p = Primitive::Ball { center, radius };
        p.validate()?;
        Ok(p)
    }

    pub fn polygon(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let p = Primitive::Polygon { vertices };
        p.validate()?;
        Ok(p)
    }

    /// Half-space with the normal rescaled to unit length.
    pub fn half_space(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let len = normal.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(len > 0.0 && len.is_finite()) {
            return Err(Error::InvalidArgument("half-space normal must be nonzero".into()));
        }
        Ok(Primitive::HalfSpace { normal: normal.iter().map(|x| x / len).collect(), offset: offset / len })
    }

    /// Dimension of the space the primitive lives in.
    pub fn dim(&self) -> usize {
        match self {
            Primitive::Box { lo, .. } => lo.len(),
            Primitive::Ball { center, .. } => center.len(),
            Primitive::Polygon { .. } => 2,
            Primitive::HalfSpace { normal, .. } => normal.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Primitive::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() || !finite(lo) || !finite(hi) {
                    return Err(Error::InvalidArgument("box bounds must be finite and of equal length".into()));
                }
                if lo.iter().zip(hi).any(|(l, h)| l > h) {
                    return Err(Error::InvalidArgument("box has lo > hi".into()));
                }
            }
            Primitive::Ball { center, radius } => {
                if center.is_empty() || !finite(center) || !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::InvalidArgument("ball needs a finite center and positive radius".into()));
                }
            }
            Primitive::Polygon { vertices } => {
                if vertices.len() < 3 || vertices.iter().any(|v| !finite(v)) {
                    return Err(Error::InvalidArgument("polygon needs at least three finite vertices".into()));
                }
                let n = vertices.len();
                let mut turning = 0.0;
                for i in 0..n {
                    let (a, b, c) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
                    let e1 = [b[0] - a[0], b[1] - a[1]];
                    let e2 = [c[0] - b[0], c[1] - b[1]];
                    let cross = e1[0] * e2[1] - e1[1] * e2[0];
                    if cross < 0.0 {
                        return Err(Error::InvalidArgument("polygon must be convex and counter-clockwise".into()));
                    }
                    turning += cross.atan2(e1[0] * e2[0] + e1[1] * e2[1]);
                }
                if (turning - std::f64::consts::TAU).abs() > 1e-6 {
                    return Err(Error::InvalidArgument("polygon must be simple and wind once".into()));
                }
            }
            Primitive::HalfSpace { normal, offset } => {
                let len = normal.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !finite(normal) || !offset.is_finite() || (len - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("half-space needs a unit normal".into()));
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!("point of length {} vs set dimension {}", x.len(), self.dim())));
        }
        Ok(())
    }

    /// Euclidean distance from `x` to the primitive; zero on the closure.
    pub fn dist(&self, x: &[f64]) -> f64 {
        match self {
            Primitive::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| {
                    let d = (l - v).max(v - h).max(0.0);
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            Primitive::Ball { center, radius } => (dist(x, center) - radius).max(0.0),
            Primitive::Polygon { vertices } => {
                if polygon_contains(vertices, x) {
                    return 0.0;
                }
                let n = vertices.len();
                (0..n).map(|i| segment_dist(x, vertices[i], vertices[(i + 1) % n])).fold(f64::INFINITY, f64::min)
            }
            Primitive::HalfSpace { normal, offset } => (dot(normal, x) - offset).max(0.0),
        }
    }

    /// Distance from `x` to the complement (penetration depth); zero outside.
    pub fn depth(&self, x: &[f64]) -> f64 {
        match self {
            Primitive::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| (v - l).min(h - v))
                .fold(f64::INFINITY, f64::min)
                .max(0.0),
            Primitive::Ball { center, radius } => (radius - dist(x, center)).max(0.0),
            Primitive::Polygon { vertices } => {
                let n = vertices.len();
                (0..n).map(|i| edge_signed_depth(x, vertices[i], vertices[(i + 1) % n])).fold(f64::INFINITY, f64::min).max(0.0)
            }
            Primitive::HalfSpace { normal, offset } => (offset - dot(normal, x)).max(0.0),
        }
    }

    /// Closed-set membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.dist(x) == 0.0
    }

    /// The primitive translated by `v`.
    pub fn translated(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.dim() {
            return Err(Error::Dimension("translation length differs from set dimension".into()));
        }
        Ok(match self {
            Primitive::Box { lo, hi } => {
                Primitive::Box { lo: add(lo, v), hi: add(hi, v) }
            }
            Primitive::Ball { center, radius } => Primitive::Ball { center: add(center, v), radius: *radius },
            Primitive::Polygon { vertices } => {
                Primitive::Polygon { vertices: vertices.iter().map(|p| [p[0] + v[0], p[1] + v[1]]).collect() }
            }
            Primitive::HalfSpace { normal, offset } => {
                Primitive::HalfSpace { normal: normal.clone(), offset: offset + dot(normal, v) }
            }
        })
    }
}

/// A finite union of primitives sharing one dimension. The empty union is the
/// empty set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetExpr {
    pub primitives: Vec<Primitive>,
}

impl SetExpr {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let s = Self { primitives };
        s.validate()?;
        Ok(s)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate()?;
        }
        if let Some(first) = self.primitives.first() {
            if self.primitives.iter().any(|p| p.dim() != first.dim()) {
                return Err(Error::Dimension("union mixes primitive dimensions".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.primitives.first().map(Primitive::dim)
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Minimum over primitives; `+inf` for the empty union.
    pub fn dist(&self, x: &[f64]) -> f64 {
        self.primitives.iter().map(|p| p.dist(x)).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.primitives.iter().any(|p| p.contains(x))
    }

    fn single(&self) -> Result<&Primitive> {
        match self.primitives.as_slice() {
            [p] => Ok(p),
            _ => Err(Error::NonConvex(format!("union of {} primitives", self.primitives.len()))),
        }
    }
}

/// Distance from `x` to `s`, checking dimensions.
pub fn dist_to_set(x: &[f64], s: &SetExpr) -> Result<f64> {
    if let Some(p) = s.primitives.first() {
        p.check_dim(x)?;
    }
    Ok(s.dist(x))
}

/// Penetration depth of `x` in a single convex primitive.
pub fn dist_to_complement(x: &[f64], s: &SetExpr) -> Result<f64> {
    let p = s.single()?;
    p.check_dim(x)?;
    Ok(p.depth(x))
}

/// Open-ball convention: a ball of radius `r` meets `s` iff `dist < r`.
pub fn ball_intersects(center: &[f64], r: f64, s: &SetExpr) -> Result<bool> {
    Ok(dist_to_set(center, s)? < r)
}

pub fn ball_contained(center: &[f64], r: f64, s: &SetExpr) -> Result<bool> {
    Ok(dist_to_complement(center, s)? >= r)
}

/// Uniform sample inside the `k`-ball of radius `r` around `center`.
pub fn sample_in_ball<R: Rng>(rng: &mut R, center: &[f64], r: f64, out: &mut [f64]) {
    let k = center.len();
    let mut len = 0.0;
    for o in out.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *o = g;
        len += g * g;
    }
    let len = len.sqrt().max(f64::MIN_POSITIVE);
    let radius = r * rng.random::<f64>().powf(1.0 / k as f64);
    for (o, c) in out.iter_mut().zip(center) {
        *o = c + *o / len * radius;
    }
}

/// Monte Carlo estimate of the fraction of the ball that lies in `inside`.
pub fn volume_fraction<F: Fn(&[f64]) -> bool>(center: &[f64], r: f64, n_mc: usize, seed: u64, inside: F) -> f64 {
    if n_mc == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; center.len()];
    let mut hits = 0usize;
    for _ in 0..n_mc {
        sample_in_ball(&mut rng, center, r, &mut buf);
        if inside(&buf) {
            hits += 1;
        }
    }
    hits as f64 / n_mc as f64
}

/// `Vol(ball ∩ S) / Vol(ball)`, estimated from `n_mc` seeded samples.
pub fn volume_ratio(center: &[f64], r: f64, s: &SetExpr, n_mc: usize, seed: u64) -> Result<f64> {
    dist_to_set(center, s)?;
    if r <= 0.0 {
        return Ok(if s.contains(center) { 1.0 } else { 0.0 });
    }
    Ok(volume_fraction(center, r, n_mc, seed, |x| s.contains(x)))
}

/// Admissible control set `U` paired with the tracking gain.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlConstraint {
    pub set: Primitive,
    pub gain: DMatrix<f64>,
}

impl ControlConstraint {
    pub fn new(set: Primitive, gain: DMatrix<f64>) -> Result<Self> {
        set.validate()?;
        if !matches!(set, Primitive::Ball { .. } | Primitive::Box { .. }) {
            return Err(Error::NonConvex("control set must be a ball or a box".into()));
        }
        if gain.nrows() != set.dim() {
            return Err(Error::Dimension(format!("gain has {} rows, control set is {}-dimensional", gain.nrows(), set.dim())));
        }
        Ok(Self { set, gain })
    }
}

/// The complement of a convex primitive; used as an obstacle in control space.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplementSet {
    pub inner: Primitive,
}

impl ComplementSet {
    pub fn dist(&self, x: &[f64]) -> f64 {
        self.inner.depth(x)
    }
    pub fn contains(&self, x: &[f64]) -> bool {
        self.inner.depth(x) == 0.0
    }
}

/// `R^m \ (U - ū - K x̄)`: points `v = -K x` outside it keep the feedback
/// input `ū - K (x - x̄)` inside `U`.
pub fn control_obstacle(cc: &ControlConstraint, x_ref: &DVector<f64>, u_ff: &DVector<f64>) -> Result<ComplementSet> {
    if x_ref.len() != cc.gain.ncols() || u_ff.len() != cc.gain.nrows() {
        return Err(Error::Dimension("control obstacle inputs do not match the gain".into()));
    }
    let shift = -(u_ff + &cc.gain * x_ref);
    Ok(ComplementSet { inner: cc.set.translated(shift.as_slice())? })
}

/// Workspace description used by planners and checkers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub name: String,
    /// Workspace bounds, one entry per position coordinate.
    pub bounds_lo: Vec<f64>,
    pub bounds_hi: Vec<f64>,
    /// State coordinates that carry the workspace position.
    pub position_indices: Vec<usize>,
    pub obstacles: SetExpr,
    pub goal: Primitive,
    /// Admissible control set, if the control budget is enforced.
    #[serde(default)]
    pub control_set: Option<Primitive>,
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        let k = self.position_indices.len();
        if k == 0 || self.bounds_lo.len() != k || self.bounds_hi.len() != k {
            return Err(Error::Dimension("workspace bounds must match the position indices".into()));
        }
        if self.bounds_lo.iter().zip(&self.bounds_hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument("workspace bounds need lo < hi".into()));
        }
        self.obstacles.validate()?;
        self.goal.validate()?;
        if self.obstacles.dim().is_some_and(|d| d != k) || self.goal.dim() != k {
            return Err(Error::Dimension("obstacles and goal must live in the workspace".into()));
        }
        if let Some(u) = &self.control_set {
            u.validate()?;
        }
        Ok(())
    }

    /// `k x n` coordinate-selection matrix from state to workspace.
    pub fn position_map(&self, n: usize) -> Result<DMatrix<f64>> {
        let mut p = DMatrix::zeros(self.position_indices.len(), n);
        for (r, &c) in self.position_indices.iter().enumerate() {
            if c >= n {
                return Err(Error::Dimension(format!("position index {c} exceeds state dimension {n}")));
            }
            p[(r, c)] = 1.0;
        }
        Ok(p)
    }
}

/// Benchmark workspace families in the unit-free square `[0, size]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EnvironmentFamily {
    /// A few well-separated blocks.
    Scattered,
    /// A dense grid of blocks with jittered sizes.
    Cluttered,
    /// A wall across the workspace with a single gap of the given width.
    Narrow { width: f64 },
    /// Ten boxes of random width, height and position.
    Random,
}

/// Generates a family member. `size` is the side of the square workspace, the
/// start sits near `(0.1, 0.5) * size` and the goal ball near `(0.9, 0.5) * size`.
pub fn generate_environment(family: EnvironmentFamily, size: f64, goal_radius: f64, seed: u64) -> Result<Environment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size;
    let boxed = |x0: f64, y0: f64, x1: f64, y1: f64| Primitive::aabb(vec![x0 * s, y0 * s], vec![x1 * s, y1 * s]);
    let (name, primitives) = match family {
        EnvironmentFamily::Scattered => (
            "scattered".to_string(),
            vec![
                boxed(0.30, 0.05, 0.40, 0.25)?,
                boxed(0.30, 0.75, 0.40, 0.95)?,
                boxed(0.60, 0.05, 0.70, 0.20)?,
                boxed(0.60, 0.80, 0.70, 0.95)?,
            ],
        ),
        EnvironmentFamily::Cluttered => {
            let mut prims = Vec::new();
            for i in 0..4 {
                for j in 0..4 {
                    let cx = 0.25 + 0.15 * i as f64 + rng.random_range(-0.02..0.02);
                    let cy = 0.15 + 0.23 * j as f64 + rng.random_range(-0.02..0.02);
                    let hw = rng.random_range(0.02..0.04);
                    let hh = rng.random_range(0.02..0.04);
                    prims.push(boxed(cx - hw, cy - hh, cx + hw, cy + hh)?);
                }
            }
            ("cluttered".to_string(), prims)
        }
        EnvironmentFamily::Narrow { width } => {
            if !(width > 0.0 && width < s) {
                return Err(Error::InvalidArgument(format!("gap width {width} must lie in (0, {s})")));
            }
            let half = 0.5 * width / s;
            let thickness = 0.04;
            (
                format!("narrow({width})"),
                vec![
                    boxed(0.5 - thickness / 2.0, 0.0, 0.5 + thickness / 2.0, 0.5 - half)?,
                    boxed(0.5 - thickness / 2.0, 0.5 + half, 0.5 + thickness / 2.0, 1.0)?,
                ],
            )
        }
        EnvironmentFamily::Random => {
            let mut prims = Vec::new();
            while prims.len() < 10 {
                let w = rng.random_range(0.03..0.15);
                let h = rng.random_range(0.03..0.15);
                let x = rng.random_range(0.2..0.8 - w);
                let y = rng.random_range(0.0..1.0 - h);
                // Keep start and goal neighbourhoods free.
                let blocks_start = y < 0.62 && y + h > 0.38 && x < 0.22;
                let blocks_goal = y < 0.62 && y + h > 0.38 && x + w > 0.78;
                if !blocks_start && !blocks_goal {
                    prims.push(boxed(x, y, x + w, y + h)?);
                }
            }
            ("random".to_string(), prims)
        }
    };
    let env = Environment {
        name,
        bounds_lo: vec![0.0, 0.0],
        bounds_hi: vec![s, s],
        position_indices: vec![0, 1],
        obstacles: SetExpr::new(primitives)?,
        goal: Primitive::ball(vec![0.9 * s, 0.5 * s], goal_radius)?,
        control_set: None,
    };
    env.validate()?;
    Ok(env)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn polygon_contains(vertices: &[[f64; 2]], x: &[f64]) -> bool {
    let n = vertices.len();
    (0..n).all(|i| edge_signed_depth(x, vertices[i], vertices[(i + 1) % n]) >= 0.0)
}

/// Signed distance of `x` to the supporting line of edge `a -> b`, positive on
/// the interior (left) side.
fn edge_signed_depth(x: &[f64], a: [f64; 2], b: [f64; 2]) -> f64 {
    let e = [b[0] - a[0], b[1] - a[1]];
    let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
    (e[0] * (x[1] - a[1]) - e[1] * (x[0] - a[0])) / len
}

fn segment_dist(x: &[f64], a: [f64; 2], b: [f64; 2]) -> f64 {
    let e = [b[0] - a[0], b[1] - a[1]];
    let w = [x[0] - a[0], x[1] - a[1]];
    let len2 = e[0] * e[0] + e[1] * e[1];
    let t = if len2 > 0.0 { ((w[0] * e[0] + w[1] * e[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [w[0] - t * e[0], w[1] - t * e[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}
