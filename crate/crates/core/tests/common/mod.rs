#![allow(dead_code)]

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::Rng;
use tubeplan::dist::WeightedAtoms;

/// Transportation LP solved by a generic simplex code, independent of the
/// library's network simplex.
pub fn lp_transport(supply: &[f64], demand: &[f64], cost: &[f64]) -> f64 {
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let nq = demand.len();
    let vars: Vec<_> = cost.iter().map(|&c| problem.add_var(c, (0.0, f64::INFINITY))).collect();
    for (i, &s) in supply.iter().enumerate() {
        let row: Vec<_> = (0..nq).map(|j| (vars[i * nq + j], 1.0)).collect();
        problem.add_constraint(&row, ComparisonOp::Eq, s);
    }
    for (j, &d) in demand.iter().enumerate() {
        let col: Vec<_> = (0..supply.len()).map(|i| (vars[i * nq + j], 1.0)).collect();
        problem.add_constraint(&col, ComparisonOp::Eq, d);
    }
    problem.solve().expect("transport LP is feasible").objective()
}

pub fn lp_w1(p: &WeightedAtoms, q: &WeightedAtoms) -> f64 {
    let mut cost = Vec::new();
    for (x, _) in p.iter() {
        for (y, _) in q.iter() {
            cost.push(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    lp_transport(p.weights(), q.weights(), &cost)
}

/// Random atoms with weights normalised to one.
pub fn random_atoms<R: Rng>(rng: &mut R, dim: usize, max_atoms: usize, scale: f64) -> WeightedAtoms {
    let k = rng.random_range(1..=max_atoms);
    let points: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-scale..scale)).collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let head: f64 = weights[..k - 1].iter().sum();
    weights[k - 1] = 1.0 - head;
    WeightedAtoms::new(dim, points, weights).expect("valid random atoms")
}

/// A tube whose every time step is the ball `(center, eps)`: one anchor at
/// zero and zero moment bounds, so no radius growth.
pub fn fixed_tube(center: WeightedAtoms, eps: f64, projection: nalgebra::DMatrix<f64>) -> tubeplan::tube::AmbiguityTube {
    use tubeplan::linsys::to_rows;
    use tubeplan::tube::{Anchor, AmbiguityTube, TubeFile, TUBE_FORMAT_VERSION};
    let n = projection.ncols();
    let file = TubeFile {
        format_version: TUBE_FORMAT_VERSION,
        a_cl: to_rows(&(nalgebra::DMatrix::identity(n, n) * 0.5)),
        g: to_rows(&nalgebra::DMatrix::identity(n, n)),
        projection: to_rows(&projection),
        moment_x0: 0.0,
        moment_w: 0.0,
        t_max: 10,
        anchors: vec![Anchor { tau: 0, center, radius: eps, concentration: eps, cluster_cost: 0.0, samples: 1 }],
    };
    AmbiguityTube::from_file(file).expect("consistent fixed tube")
}
