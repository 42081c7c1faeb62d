//! Stochastic linear plant, tracking feedback law and the matrix-norm
//! sequences that drive the ambiguity-radius formulas.
//!
//! The plant is `x_{t+1} = A x_t + B u_t + G w_t` under the tracking law
//! `u_t = -K (x_t - x̄_t) + ū_t`. The nominal (reference) trajectory follows
//! `x̄_{t+1} = A x̄_t + B ū_t`, and the tracking error `e_t = x_t - x̄_t`
//! evolves as `e_{t+1} = A_cl e_t + G w_t` with `A_cl = A - B K`, independent
//! of the feedforward controls.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete-time plant matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Dimension(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!("B must be {n}xm with m>=1, got {}x{}", b.nrows(), b.ncols())));
        }
        if g.nrows() != n || g.ncols() == 0 {
            return Err(Error::Dimension(format!("G must be {n}xd with d>=1, got {}x{}", g.nrows(), g.ncols())));
        }
        if a.iter().chain(b.iter()).chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("system matrices must be finite".into()));
        }
        Ok(Self { a, b, g })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Control dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    /// Disturbance dimension.
    pub fn d(&self) -> usize {
        self.g.ncols()
    }
}

/// Tracking gain `K` (m x n).
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackLaw {
    k: DMatrix<f64>,
}

impl FeedbackLaw {
    pub fn new(k: DMatrix<f64>) -> Self {
        Self { k }
    }
    pub fn gain(&self) -> &DMatrix<f64> {
        &self.k
    }
    fn check(&self, sys: &LinearSystem) -> Result<()> {
        if self.k.nrows() != sys.m() || self.k.ncols() != sys.n() {
            return Err(Error::Dimension(format!(
                "K must be {}x{}, got {}x{}",
                sys.m(),
                sys.n(),
                self.k.nrows(),
                self.k.ncols()
            )));
        }
        Ok(())
    }
}

/// Diameters of the initial-error and disturbance supports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSpec {
    pub diam_x0: f64,
    pub diam_w: f64,
}

impl SupportSpec {
    pub fn new(diam_x0: f64, diam_w: f64) -> Result<Self> {
        if !(diam_x0 >= 0.0 && diam_w >= 0.0) {
            return Err(Error::InvalidArgument("support diameters must be nonnegative".into()));
        }
        Ok(Self { diam_x0, diam_w })
    }
}

/// A nominal motion plan `((ū_t, x̄_t))_{t=0..T}`.
///
/// `states` holds `T + 1` reference states and `controls` the `T` feedforward
/// inputs applied between them.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionPlan {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl MotionPlan {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Largest relative deviation between the stored states and a replay of
    /// the stored controls through the reference dynamics.
    pub fn replay_error(&self, sys: &LinearSystem) -> Result<f64> {
        if self.states.len() != self.controls.len() + 1 {
            return Err(Error::Dimension("plan needs exactly one more state than controls".into()));
        }
        let mut x = self.states[0].clone();
        let mut worst = 0.0f64;
        for (u, stored) in self.controls.iter().zip(&self.states[1..]) {
            x = reference_step(sys, &x, u)?;
            let scale = stored.norm().max(1.0);
            worst = worst.max((&x - stored).norm() / scale);
        }
        Ok(worst)
    }
}

/// `A_cl = A - B K`.
pub fn closed_loop_matrix(sys: &LinearSystem, law: &FeedbackLaw) -> Result<DMatrix<f64>> {
    law.check(sys)?;
    Ok(&sys.a - &sys.b * &law.k)
}

fn check_len(what: &str, v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

/// `x̄_{t+1} = A x̄_t + B ū_t`.
pub fn reference_step(sys: &LinearSystem, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("reference state", x, sys.n())?;
    check_len("feedforward control", u, sys.m())?;
    Ok(&sys.a * x + &sys.b * u)
}

/// `e_{t+1} = A_cl e_t + G w_t`.
pub fn error_step(sys: &LinearSystem, law: &FeedbackLaw, e: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("error", e, sys.n())?;
    check_len("disturbance", w, sys.d())?;
    let a_cl = closed_loop_matrix(sys, law)?;
    Ok(&a_cl * e + &sys.g * w)
}

/// `x_{t+1} = A_cl x_t + B (K x̄_t + ū_t) + G w_t`.
pub fn closed_loop_step(
    sys: &LinearSystem,
    law: &FeedbackLaw,
    x: &DVector<f64>,
    x_ref: &DVector<f64>,
    u_ff: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("state", x, sys.n())?;
    check_len("reference state", x_ref, sys.n())?;
    check_len("feedforward control", u_ff, sys.m())?;
    check_len("disturbance", w, sys.d())?;
    let a_cl = closed_loop_matrix(sys, law)?;
    Ok(&a_cl * x + &sys.b * (&law.k * x_ref + u_ff) + &sys.g * w)
}

/// Spectral (operator-2) norm: the largest singular value.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.singular_values().max()
}

/// `‖A_cl^t‖` for `t = 0..=t_max` and `‖A_cl^t G‖` for `t = 0..t_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormSequences {
    pub state: Vec<f64>,
    pub noise: Vec<f64>,
}

pub fn norm_sequences(sys: &LinearSystem, law: &FeedbackLaw, t_max: usize) -> Result<NormSequences> {
    let a_cl = closed_loop_matrix(sys, law)?;
    let mut power = DMatrix::<f64>::identity(sys.n(), sys.n());
    let mut state = Vec::with_capacity(t_max + 1);
    let mut noise = Vec::with_capacity(t_max);
    for t in 0..=t_max {
        state.push(operator_norm(&power));
        if t < t_max {
            noise.push(operator_norm(&(&power * &sys.g)));
            power = &a_cl * &power;
        }
    }
    Ok(NormSequences { state, noise })
}

/// `‖A_cl^t‖ diam(X0) + Σ_{i<t} ‖A_cl^i G‖ diam(W)`, an upper bound on the
/// diameter of the support of the error at time `t`.
pub fn support_diameter_bound(sys: &LinearSystem, law: &FeedbackLaw, spec: &SupportSpec, t: usize) -> Result<f64> {
    let seq = norm_sequences(sys, law, t)?;
    Ok(seq.state[t] * spec.diam_x0 + seq.noise.iter().sum::<f64>() * spec.diam_w)
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension("spectral radius needs a square matrix".into()));
    }
    if m.nrows() == 1 {
        return Ok(m[(0, 0)].abs());
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), 1e-14, 10_000).ok_or(Error::NonConvergence)?;
    Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Spectral radius of `A_cl`; tube construction refuses values `>= 1`.
pub fn stability_margin(sys: &LinearSystem, law: &FeedbackLaw) -> Result<f64> {
    spectral_radius(&closed_loop_matrix(sys, law)?)
}

/// Infinite-horizon discrete LQR gain by Riccati value iteration.
pub fn lqr_gain(sys: &LinearSystem, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<FeedbackLaw> {
    let (a, b) = (&sys.a, &sys.b);
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let s_inv = s.try_inverse().ok_or(Error::NonConvergence)?;
        let k = &s_inv * &btp * a;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let delta = (&next - &p).amax();
        p = next;
        if delta <= 1e-12 * p.amax().max(1.0) {
            return Ok(FeedbackLaw::new(k));
        }
    }
    Err(Error::NonConvergence)
}

/// Converts a matrix to nested rows for human-readable files.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Builds a matrix from nested rows; all rows must share a length.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
