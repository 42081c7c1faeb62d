//! Closed-form worst-case event probabilities over a Wasserstein ball.
//!
//! The adversary has a transport budget `ε`. Moving mass `m` from an atom to
//! the nearest point of a set costs `m` times the atom's distance to it, so the
//! cheapest way to push probability into the set is to drain atoms in order of
//! increasing distance. That greedy plan is optimal (a fractional knapsack).

use crate::dist::AmbiguitySet;
use crate::error::{Error, Result};
use crate::geometry::{dist_to_complement, dist_to_set, SetExpr};

/// Probability mass left with positive distance after the adversary spends
/// `budget` moving mass to distance zero. Input pairs are `(weight, distance)`.
pub fn greedy_remaining_mass(mut atoms: Vec<(f64, f64)>, budget: f64) -> f64 {
    atoms.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut left = budget.max(0.0);
    for (i, &(w, d)) in atoms.iter().enumerate() {
        if d <= 0.0 {
            continue;
        }
        let cost = w * d;
        if cost <= left {
            left -= cost;
            continue;
        }
        let moved = left / d;
        let tail: f64 = atoms[i + 1..].iter().map(|a| a.0).sum();
        return (w - moved) + tail;
    }
    0.0
}

/// `min_{P ∈ B} P[x ∉ S]`: the smallest probability of staying out of `s`.
pub fn worst_case_prob_outside(amb: &AmbiguitySet, s: &SetExpr) -> Result<f64> {
    let atoms = amb
        .center
        .iter()
        .map(|(x, w)| Ok((w, dist_to_set(x, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(greedy_remaining_mass(atoms, amb.radius))
}

/// `min_{P ∈ B} P[x ∈ S]` for a single convex primitive `s`.
pub fn worst_case_prob_inside(amb: &AmbiguitySet, s: &SetExpr) -> Result<f64> {
    if s.primitives.len() != 1 {
        return Err(Error::NonConvex(format!("union of {} primitives", s.primitives.len())));
    }
    let atoms = amb
        .center
        .iter()
        .map(|(x, w)| Ok((w, dist_to_complement(x, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(greedy_remaining_mass(atoms, amb.radius))
}
