//! Built-in regression problems.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::poly::{Monomial, Polynomial, PolynomialModel};
use crate::problem::{CouplingMatrix, PartitionedProblem, Subsystem};

pub const BUILTIN_NAMES: [&str; 3] = ["qp_pair", "bound_pair", "random"];

fn scalar_sub(name: &str, model: PolynomialModel, a: f64) -> Subsystem {
    let coupling = CouplingMatrix::from_dense(&DMatrix::from_element(1, 1, a));
    Subsystem::new(Arc::new(model), coupling).with_name(name)
}

/// `min 1/2 x1^2 + 1/2 x2^2  s.t.  x1 + x2 = 2`, solution `x = (1, 1)`,
/// `lambda = -1`.
pub fn qp_pair() -> PartitionedProblem {
    let half = || PolynomialModel::new(1, Polynomial::quadratic_diag(&[1.0], &[0.0]));
    PartitionedProblem::new(
        vec![scalar_sub("left", half(), 1.0), scalar_sub("right", half(), 1.0)],
        DVector::from_element(1, 2.0),
    )
    .expect("valid built-in")
    .with_name("qp_pair")
}

/// `min 1/2 (x1 - 2)^2 + 1/2 x2^2  s.t.  x1 - x2 = 0, x1 <= 0.5`, solution
/// `x = (0.5, 0.5)`, `lambda = 0.5`, bound multiplier `1`.
pub fn bound_pair() -> PartitionedProblem {
    let left = PolynomialModel::new(1, Polynomial::quadratic_diag(&[1.0], &[-2.0]))
        .with_ineq(Polynomial::affine(&[(0, 1.0)], -0.5));
    let right = PolynomialModel::new(1, Polynomial::quadratic_diag(&[1.0], &[0.0]));
    PartitionedProblem::new(
        vec![scalar_sub("bounded", left, 1.0), scalar_sub("free", right, -1.0)],
        DVector::zeros(1),
    )
    .expect("valid built-in")
    .with_name("bound_pair")
}

/// Random convex instance on a chain of subsystems: strongly convex
/// quadratics with a quartic term, one nonlinear equality and box
/// inequalities per subsystem, and chain consensus rows.
pub fn random_problem(seed: u64, n_subsystems: usize, dim: usize) -> PartitionedProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_c = n_subsystems.saturating_sub(1).max(1);
    let mut subs = Vec::with_capacity(n_subsystems);
    for i in 0..n_subsystems {
        let diag: Vec<f64> = (0..dim).map(|_| rng.gen_range(1.0..3.0)).collect();
        let linear: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut objective = Polynomial::quadratic_diag(&diag, &linear);
        objective.terms.push(Monomial::new(0.05, &[(0, 4)]));
        let mut model = PolynomialModel::new(dim, objective);
        if dim >= 2 {
            let c = rng.gen_range(-0.2..0.2);
            model = model.with_eq(Polynomial::new(vec![
                Monomial::new(1.0, &[(dim - 1, 1)]),
                Monomial::new(-0.1, &[(0, 2)]),
                Monomial::new(-c, &[]),
            ]));
        }
        for v in 0..dim {
            model = model
                .with_ineq(Polynomial::affine(&[(v, 1.0)], -rng.gen_range(0.3..1.0)))
                .with_ineq(Polynomial::affine(&[(v, -1.0)], -rng.gen_range(0.3..1.0)));
        }
        let mut triplets = Vec::new();
        if i > 0 {
            triplets.push((i - 1, 0, rng.gen_range(0.5..1.5)));
        }
        if i + 1 < n_subsystems {
            triplets.push((i, 0, -rng.gen_range(0.5..1.5)));
        }
        if n_subsystems == 1 {
            triplets.push((0, 0, 1.0));
        }
        let coupling = CouplingMatrix::from_triplets(n_c, dim, &triplets).expect("in range");
        subs.push(Subsystem::new(Arc::new(model), coupling).with_name(format!("s{i}")));
    }
    let b = DVector::from_fn(n_c, |_, _| rng.gen_range(-0.2..0.2));
    PartitionedProblem::new(subs, b)
        .expect("valid random problem")
        .with_name(format!("random_{seed}"))
}

pub fn builtin(name: &str, seed: u64) -> Result<PartitionedProblem> {
    match name {
        "qp_pair" => Ok(qp_pair()),
        "bound_pair" => Ok(bound_pair()),
        "random" => Ok(random_problem(seed, 3, 3)),
        _ => Err(Error::Usage(format!(
            "unknown built-in problem {name:?} (available: {})",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}
