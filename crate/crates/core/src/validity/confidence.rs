//! Confidence tubes: origin-centered balls holding more than a target share of
//! the worst-case error mass, one per anchor region.

use serde::{Deserialize, Serialize};

use super::worst_case::greedy_remaining_mass;
use crate::dist::WeightedAtoms;
use crate::error::{Error, Result};
use crate::tube::AmbiguityTube;

pub const CONFIDENCE_FORMAT_VERSION: u32 = 1;
const BISECTION_STEPS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTube {
    pub format_version: u32,
    pub target: f64,
    /// Ball radius per anchor region.
    pub radii: Vec<f64>,
    /// Ambiguity radius each ball was sized for.
    pub eps_bar: Vec<f64>,
    /// Region index for `t < regions.len()`.
    pub regions: Vec<usize>,
    /// Region for every later time step.
    pub last_region: usize,
}

impl ConfidenceTube {
    pub fn radius_for(&self, t: usize) -> f64 {
        let j = self.regions.get(t).copied().unwrap_or(self.last_region);
        self.radii[j]
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIDENCE_FORMAT_VERSION {
            return Err(Error::Version { found: self.format_version, expected: CONFIDENCE_FORMAT_VERSION });
        }
        let j = self.radii.len();
        if j == 0 || self.eps_bar.len() != j || self.last_region >= j || self.regions.iter().any(|&r| r >= j) {
            return Err(Error::Dimension("confidence tube regions do not match its radii".into()));
        }
        if self.radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidArgument("confidence radii must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Worst-case probability that the error lies strictly inside `ball(0, r)`.
pub fn worst_case_mass_in_ball(center: &WeightedAtoms, eps: f64, r: f64) -> f64 {
    let atoms = center.iter().map(|(x, w)| (w, (r - crate::dist::atoms_norm(x)).max(0.0))).collect();
    greedy_remaining_mass(atoms, eps)
}

/// Smallest radius (up to bisection resolution, rounded up) whose ball keeps
/// worst-case mass strictly above `p_target`.
pub fn confidence_radius(center: &WeightedAtoms, eps: f64, p_target: f64) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::Unreachable(p_target, "target must lie in (0,1)".into()));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Unreachable(p_target, format!("ambiguity radius {eps} is not finite")));
    }
    let max_norm = center.max_norm();
    let mut hi = max_norm + eps / (1.0 - p_target) * 1.01 + 1e-12 * (1.0 + max_norm);
    let mut grow = 0;
    while worst_case_mass_in_ball(center, eps, hi) <= p_target {
        hi *= 2.0;
        grow += 1;
        if grow > 60 || !hi.is_finite() {
            return Err(Error::Unreachable(p_target, format!("no finite ball holds the mass for ε = {eps}")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if worst_case_mass_in_ball(center, eps, mid) > p_target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    debug_assert!(worst_case_mass_in_ball(center, eps, hi) > p_target);
    Ok(hi)
}

/// Sizes one origin-centered ball per anchor region using `ε̄_j`.
pub fn build_confidence_tube(tube: &AmbiguityTube, p_target: f64) -> Result<ConfidenceTube> {
    let mut radii = Vec::with_capacity(tube.anchors().len());
    let mut eps_bar = Vec::with_capacity(tube.anchors().len());
    for (j, anchor) in tube.anchors().iter().enumerate() {
        let e = tube.sup_radius_by_anchor(j);
        radii.push(confidence_radius(&anchor.center, e, p_target)?);
        eps_bar.push(e);
    }
    let regions = (0..tube.t_max()).map(|t| tube.region_of(t)).collect();
    let conf = ConfidenceTube {
        format_version: CONFIDENCE_FORMAT_VERSION,
        target: p_target,
        radii,
        eps_bar,
        regions,
        last_region: tube.last_region(),
    };
    conf.validate()?;
    Ok(conf)
}
