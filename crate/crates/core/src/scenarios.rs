//! Preset plants and noise models used by the benchmarks.
//!
//! The 4-D plant is a discrete double integrator and the 8-D plant a
//! linearized planar quadrotor; both are stand-ins rather than the exact
//! plants of any published study.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsys::{lqr_gain, to_rows, FeedbackLaw, LinearSystem};
use crate::montecarlo::{GroundTruth, NoiseModel};

/// Gravity used by the quadrotor linearization.
const GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    DoubleIntegrator,
    Drone,
    ErrorSystem2d,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double_integrator" => Ok(Self::DoubleIntegrator),
            "drone" => Ok(Self::Drone),
            "error_system_2d" => Ok(Self::ErrorSystem2d),
            other => Err(Error::InvalidArgument(format!("unknown preset {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Pushforward,
}

/// Planar double integrator `(x, y, vx, vy)` with step `dt`; noise enters
/// every coordinate (`G = I`).
pub fn double_integrator(dt: f64) -> Result<(LinearSystem, FeedbackLaw)> {
    let mut a = DMatrix::identity(4, 4);
    a[(0, 2)] = dt;
    a[(1, 3)] = dt;
    let mut b = DMatrix::zeros(4, 2);
    b[(0, 0)] = 0.5 * dt * dt;
    b[(1, 1)] = 0.5 * dt * dt;
    b[(2, 0)] = dt;
    b[(3, 1)] = dt;
    let sys = LinearSystem::new(a, b, DMatrix::identity(4, 4))?;
    let law = lqr_gain(&sys, &DMatrix::identity(4, 4), &DMatrix::from_diagonal_element(2, 2, 0.1))?;
    Ok((sys, law))
}

/// Zero-mean noise for the double integrator: positional initial error with
/// covariance `1e-3 I` and velocity disturbances with covariance
/// `1e-3 [[2, 1], [1, 2]]`, both truncated at 4 standard deviations. The
/// pushforward variant replaces the disturbance by the radial map of a
/// uniform square with the same scale matrix.
pub fn double_integrator_noise(kind: NoiseKind, scale: f64) -> GroundTruth {
    let s = 1e-3 * scale;
    let mut p0 = DMatrix::zeros(4, 4);
    p0[(0, 0)] = s;
    p0[(1, 1)] = s;
    let sigma = DMatrix::from_row_slice(2, 2, &[2.0 * s, s, s, 2.0 * s]);
    let x0 = NoiseModel::TruncatedGaussian { mean: vec![0.0; 4], covariance: to_rows(&p0), truncation: 4.0 };
    let w = match kind {
        NoiseKind::Gaussian => {
            let mut pw = DMatrix::zeros(4, 4);
            pw.view_mut((2, 2), (2, 2)).copy_from(&sigma);
            NoiseModel::TruncatedGaussian { mean: vec![0.0; 4], covariance: to_rows(&pw), truncation: 4.0 }
        }
        NoiseKind::Pushforward => {
            NoiseModel::PushforwardUniform { dim: 4, indices: [2, 3], sigma: to_rows(&sigma), radius: 4.0, exponent: 4.0 }
        }
    };
    GroundTruth { x0, w }
}

/// Linearized planar quadrotor about hover, per axis `(p, v, θ, ω)` with
/// `p' = v`, `v' = g θ`, `θ' = ω`, `ω' = u`, Euler-discretized. The state is
/// ordered `(x, y, vx, vy, θx, θy, ωx, ωy)` and the 2-D disturbance reaches
/// the velocities only.
pub fn drone(dt: f64) -> Result<(LinearSystem, FeedbackLaw)> {
    let mut a = DMatrix::identity(8, 8);
    for axis in 0..2 {
        a[(axis, 2 + axis)] = dt;
        a[(2 + axis, 4 + axis)] = GRAVITY * dt;
        a[(4 + axis, 6 + axis)] = dt;
    }
    let mut b = DMatrix::zeros(8, 2);
    b[(6, 0)] = dt;
    b[(7, 1)] = dt;
    let ra = (3f64.sqrt() + 1.0) / (2.0 * 1000f64.sqrt());
    let rb = (3f64.sqrt() - 1.0) / (2.0 * 1000f64.sqrt());
    let mut g = DMatrix::zeros(8, 2);
    g[(2, 0)] = ra;
    g[(3, 0)] = rb;
    g[(2, 1)] = rb;
    g[(3, 1)] = ra;
    let sys = LinearSystem::new(a, b, g)?;
    let mut q = DMatrix::identity(8, 8);
    q[(0, 0)] = 10.0;
    q[(1, 1)] = 10.0;
    let law = lqr_gain(&sys, &q, &DMatrix::from_diagonal_element(2, 2, 1.0))?;
    Ok((sys, law))
}

/// Standard-normal disturbance truncated at 4σ and a small positional
/// initial error.
pub fn drone_noise(scale: f64) -> GroundTruth {
    let mut p0 = DMatrix::zeros(8, 8);
    p0[(0, 0)] = 1e-4 * scale;
    p0[(1, 1)] = 1e-4 * scale;
    let pw = DMatrix::from_diagonal_element(2, 2, scale);
    GroundTruth {
        x0: NoiseModel::TruncatedGaussian { mean: vec![0.0; 8], covariance: to_rows(&p0), truncation: 4.0 },
        w: NoiseModel::TruncatedGaussian { mean: vec![0.0; 2], covariance: to_rows(&pw), truncation: 4.0 },
    }
}

/// A stable 2-D error system with identity input and noise maps and no
/// feedback, used for tube calibration.
pub fn error_system_2d() -> Result<(LinearSystem, FeedbackLaw)> {
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
    let sys = LinearSystem::new(a, DMatrix::identity(2, 2), DMatrix::identity(2, 2))?;
    Ok((sys, FeedbackLaw::new(DMatrix::zeros(2, 2))))
}

pub fn error_system_2d_noise() -> GroundTruth {
    let cov = |v: f64| to_rows(&DMatrix::from_diagonal_element(2, 2, v));
    GroundTruth {
        x0: NoiseModel::TruncatedGaussian { mean: vec![0.0; 2], covariance: cov(0.04), truncation: 4.0 },
        w: NoiseModel::TruncatedGaussian { mean: vec![0.0; 2], covariance: cov(0.01), truncation: 4.0 },
    }
}

pub fn preset(p: Preset) -> Result<(LinearSystem, FeedbackLaw)> {
    match p {
        Preset::DoubleIntegrator => double_integrator(0.1),
        Preset::Drone => drone(0.1),
        Preset::ErrorSystem2d => error_system_2d(),
    }
}
