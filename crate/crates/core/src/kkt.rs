//! Per-subsystem barrier KKT algebra.
//!
//! Each subsystem evaluates its block of the perturbed KKT residual, builds
//! and factors its local Newton matrix once per outer iteration, and from
//! that single factorization produces both its Schur contribution and, once
//! the consensus step is known, its own primal-dual step.
//!
//! Unknowns are ordered `(x, v, gamma, mu)`; the local Newton matrix is
//!
//! ```text
//! [ H    0        Jg'  Jh' ]
//! [ 0    V^-1 M   0    I   ]
//! [ Jg   0        0    0   ]
//! [ Jh   I        0    0   ]
//! ```
//!
//! which is symmetric. `V^-1 M` is the derivative of `-delta V^-1 1 + mu`
//! with respect to `v` after substituting `delta V^-1 = M`.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::problem::{CouplingMatrix, LocalPoint, Subsystem};

/// Barrier residual `F_i^delta(p_i, lambda)`.
///
/// `lambda_support` holds the consensus multipliers of the rows in `C_i`,
/// in support order.
pub fn eval_barrier_residual(
    index: usize,
    sub: &Subsystem,
    point: &LocalPoint,
    lambda_support: &DVector<f64>,
    delta: f64,
) -> Result<DVector<f64>> {
    point.check_interior(index)?;
    let (n, ng, nh) = (sub.dim(), sub.n_eq(), sub.n_ineq());
    let mut f = DVector::zeros(n + 2 * nh + ng);

    let stationarity = sub.lagrangian_gradient(&point.x, &point.gamma, &point.mu)
        + sub.coupling().transpose_mul_support(lambda_support);
    f.rows_mut(0, n).copy_from(&stationarity);
    for k in 0..nh {
        f[n + k] = -delta / point.v[k] + point.mu[k];
    }
    if ng > 0 {
        f.rows_mut(n + nh, ng).copy_from(&sub.eq(&point.x));
    }
    if nh > 0 {
        f.rows_mut(n + nh + ng, nh).copy_from(&(sub.ineq(&point.x) + &point.v));
    }
    if f.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite {
            subsystem: index,
            what: "barrier residual",
        });
    }
    Ok(f)
}

#[derive(Clone, Debug)]
pub struct LocalKktMatrix {
    pub subsystem: usize,
    pub matrix: DMatrix<f64>,
    pub n_x: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
}

impl LocalKktMatrix {
    pub fn order(&self) -> usize {
        self.matrix.nrows()
    }

    /// Diagonal of the slack block.
    pub fn slack_block_diagonal(&self) -> DVector<f64> {
        let o = self.n_x;
        DVector::from_iterator(self.n_ineq, (0..self.n_ineq).map(|k| self.matrix[(o + k, o + k)]))
    }
}

pub fn assemble_local_kkt(index: usize, sub: &Subsystem, point: &LocalPoint) -> Result<LocalKktMatrix> {
    point.check_interior(index)?;
    let (n, ng, nh) = (sub.dim(), sub.n_eq(), sub.n_ineq());
    let m = n + 2 * nh + ng;
    let (ov, og, om) = (n, n + nh, n + nh + ng);
    let mut k = DMatrix::zeros(m, m);

    let hess = sub.lagrangian_hessian(&point.x, &point.gamma, &point.mu);
    k.view_mut((0, 0), (n, n)).copy_from(&hess);
    if ng > 0 {
        let jg = sub.eq_jacobian(&point.x);
        k.view_mut((og, 0), (ng, n)).copy_from(&jg);
        k.view_mut((0, og), (n, ng)).copy_from(&jg.transpose());
    }
    if nh > 0 {
        let jh = sub.ineq_jacobian(&point.x);
        k.view_mut((om, 0), (nh, n)).copy_from(&jh);
        k.view_mut((0, om), (n, nh)).copy_from(&jh.transpose());
    }
    for j in 0..nh {
        k[(ov + j, ov + j)] = point.mu[j] / point.v[j];
        k[(ov + j, om + j)] = 1.0;
        k[(om + j, ov + j)] = 1.0;
    }
    if k.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite {
            subsystem: index,
            what: "local KKT matrix",
        });
    }
    Ok(LocalKktMatrix {
        subsystem: index,
        matrix: k,
        n_x: n,
        n_eq: ng,
        n_ineq: nh,
    })
}

/// Ladder of primal regularizations tried when the local matrix is
/// singular or its condition estimate exceeds `condition_limit`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegularizationSchedule {
    pub initial: f64,
    pub factor: f64,
    pub max: f64,
    pub condition_limit: f64,
}

impl Default for RegularizationSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-8,
            factor: 10.0,
            max: 1e-2,
            condition_limit: 1e12,
        }
    }
}

impl RegularizationSchedule {
    fn ladder(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        let mut rho = self.initial;
        while rho <= self.max * (1.0 + 1e-12) {
            out.push(rho);
            rho *= self.factor;
        }
        out
    }
}

/// LU factorization of the symmetrically equilibrated local matrix
/// `D K D`, with `D = diag(1 / sqrt(max_j |K_ij|))`.
#[derive(Clone, Debug)]
pub struct LocalFactorization {
    lu: LU<f64, Dyn, Dyn>,
    scale: DVector<f64>,
    /// Regularization added to the `x` block.
    pub regularization: f64,
    /// 1-norm condition estimate of the equilibrated matrix.
    pub condition: f64,
    /// Factorizations attempted, including rejected ones.
    pub attempts: usize,
}

impl LocalFactorization {
    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let scaled = rhs.component_mul(&self.scale);
        let y = self.lu.solve(&scaled).expect("accepted factorization is nonsingular");
        y.component_mul(&self.scale)
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut scaled = rhs.clone();
        for (mut row, &d) in scaled.row_iter_mut().zip(self.scale.iter()) {
            row *= d;
        }
        let mut y = self.lu.solve(&scaled).expect("accepted factorization is nonsingular");
        for (mut row, &d) in y.row_iter_mut().zip(self.scale.iter()) {
            row *= d;
        }
        y
    }
}

fn equilibration(k: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        k.nrows(),
        k.row_iter().map(|row| {
            let m = row.amax();
            if m > 0.0 {
                1.0 / m.sqrt()
            } else {
                1.0
            }
        }),
    )
}

/// Hager's estimate of `||A^-1||_1` for a symmetric `A` given its LU factors.
fn inverse_one_norm_estimate(lu: &LU<f64, Dyn, Dyn>, n: usize) -> Option<f64> {
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut estimate = 0.0;
    for _ in 0..5 {
        let y = lu.solve(&x)?;
        estimate = y.lp_norm(1);
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = lu.solve(&xi)?;
        let j = z.iamax();
        let zmax = z[j].abs();
        if zmax <= z.dot(&x) {
            break;
        }
        x.fill(0.0);
        x[j] = 1.0;
    }
    Some(estimate)
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn factorize_local_kkt(kkt: &LocalKktMatrix, schedule: &RegularizationSchedule) -> Result<LocalFactorization> {
    let m = kkt.order();
    for (attempt, rho) in schedule.ladder().into_iter().enumerate() {
        let attempts = attempt + 1;
        let mut k = kkt.matrix.clone();
        for j in 0..kkt.n_x {
            k[(j, j)] += rho;
        }
        let scale = equilibration(&k);
        let mut scaled = k;
        for i in 0..m {
            for j in 0..m {
                scaled[(i, j)] *= scale[i] * scale[j];
            }
        }
        let norm = one_norm(&scaled);
        let lu = scaled.lu();
        if m > 0 && !lu.is_invertible() {
            continue;
        }
        let condition = if m == 0 {
            1.0
        } else {
            match inverse_one_norm_estimate(&lu, m) {
                Some(inv) => norm * inv,
                None => continue,
            }
        };
        if !condition.is_finite() || condition > schedule.condition_limit {
            continue;
        }
        return Ok(LocalFactorization {
            lu,
            scale,
            regularization: rho,
            condition,
            attempts,
        });
    }
    Err(Error::SubsystemFailure {
        subsystem: kkt.subsystem,
        max_regularization: schedule.max,
    })
}

/// Projected Schur pair of one subsystem.
#[derive(Clone, Debug, PartialEq)]
pub struct SchurContribution {
    pub subsystem: usize,
    /// Consensus set `C_i`.
    pub support: Vec<usize>,
    /// `I_C S_i I_C'`.
    pub s_hat: DMatrix<f64>,
    /// Right-hand side restricted to `C_i`, with `b` shared equally among
    /// the subsystems owning each row.
    pub rhs_hat: DVector<f64>,
    /// `I_C (A_i x_i - A~_i K^-1 F_i)`, the part independent of `b`.
    pub coupling_rhs: DVector<f64>,
}

impl SchurContribution {
    /// `S_i` embedded in the full consensus space.
    pub fn lifted_matrix(&self, n_c: usize) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(n_c, n_c);
        for (a, &ra) in self.support.iter().enumerate() {
            for (c, &rc) in self.support.iter().enumerate() {
                s[(ra, rc)] = self.s_hat[(a, c)];
            }
        }
        s
    }

    /// `rhs_hat` embedded in the full consensus space.
    pub fn lifted_rhs(&self, n_c: usize) -> DVector<f64> {
        let mut s = DVector::zeros(n_c);
        for (a, &r) in self.support.iter().enumerate() {
            s[r] = self.rhs_hat[a];
        }
        s
    }

    /// `s_i = A_i x_i - A~_i K^-1 F_i - b / |S|` over all consensus rows.
    pub fn even_split_rhs(&self, b: &DVector<f64>, n_subsystems: usize) -> DVector<f64> {
        let mut s = -b / n_subsystems as f64;
        for (a, &r) in self.support.iter().enumerate() {
            s[r] += self.coupling_rhs[a];
        }
        s
    }
}

/// Builds `(S_i, s_i)` from one factorization: `|C_i|` solves against the
/// columns of `A~_i'` plus one solve against `F_i`.
///
/// `owners` gives, for each row of `C_i` in support order, the number of
/// subsystems whose consensus set contains it.
pub fn compute_schur_contribution(
    index: usize,
    sub: &Subsystem,
    factorization: &LocalFactorization,
    point: &LocalPoint,
    residual: &DVector<f64>,
    b: &DVector<f64>,
    owners: &[usize],
) -> SchurContribution {
    let coupling = sub.coupling();
    let support = coupling.support();
    let n = sub.dim();
    let m = factorization.dim();
    let a_c = coupling.support_block();
    assert_eq!(owners.len(), support.len());

    let mut rhs = DMatrix::zeros(m, support.len() + 1);
    rhs.view_mut((0, 0), (n, support.len())).copy_from(&a_c.transpose());
    rhs.column_mut(support.len()).copy_from(residual);
    let sol = factorization.solve_matrix(&rhs);

    let x_block = sol.view((0, 0), (n, support.len()));
    let s = &a_c * x_block;
    let s_hat = (&s + s.transpose()) * 0.5;

    let kinv_f = sol.view((0, support.len()), (n, 1));
    let coupling_rhs = coupling.mul_support(&point.x) - &a_c * kinv_f;
    let rhs_hat = DVector::from_iterator(
        support.len(),
        support
            .iter()
            .zip(owners)
            .zip(coupling_rhs.iter())
            .map(|((&r, &o), &c)| c - b[r] / o as f64),
    );
    SchurContribution {
        subsystem: index,
        support,
        s_hat,
        rhs_hat,
        coupling_rhs,
    }
}

/// `dp_i = -K^-1 (F_i + A~_i' dlambda)` with `dlambda` given on `C_i`.
pub fn recover_local_step(
    factorization: &LocalFactorization,
    residual: &DVector<f64>,
    coupling: &CouplingMatrix,
    dlambda_support: &DVector<f64>,
) -> DVector<f64> {
    let mut rhs = residual.clone();
    let at = coupling.transpose_mul_support(dlambda_support);
    rhs.rows_mut(0, at.len()).add_assign_from(&at);
    -factorization.solve(&rhs)
}

trait AddAssignFrom {
    fn add_assign_from(&mut self, other: &DVector<f64>);
}

impl AddAssignFrom for nalgebra::DVectorViewMut<'_, f64> {
    fn add_assign_from(&mut self, other: &DVector<f64>) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }
}

/// Splits a stacked `(x, v, gamma, mu)` vector into its blocks.
pub fn split_step(sub: &Subsystem, stacked: &DVector<f64>) -> LocalPoint {
    let (n, ng, nh) = (sub.dim(), sub.n_eq(), sub.n_ineq());
    LocalPoint {
        x: stacked.rows(0, n).into_owned(),
        v: stacked.rows(n, nh).into_owned(),
        gamma: stacked.rows(n + nh, ng).into_owned(),
        mu: stacked.rows(n + nh + ng, nh).into_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{Polynomial, PolynomialModel};
    use std::sync::Arc;

    fn sub(model: PolynomialModel, a: &[f64]) -> Subsystem {
        let dim = model.dim;
        let n_c = a.len() / dim;
        let coupling = CouplingMatrix::from_dense(&DMatrix::from_column_slice(n_c, dim, a));
        Subsystem::new(Arc::new(model), coupling)
    }

    fn half_square() -> PolynomialModel {
        PolynomialModel::new(1, Polynomial::quadratic_diag(&[1.0], &[0.0]))
    }

    fn point(x: f64, v: &[f64], mu: &[f64]) -> LocalPoint {
        LocalPoint {
            x: DVector::from_element(1, x),
            v: DVector::from_column_slice(v),
            gamma: DVector::zeros(0),
            mu: DVector::from_column_slice(mu),
        }
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn residual_examples() {
        let s = sub(half_square(), &[1.0]);
        let f = eval_barrier_residual(0, &s, &point(0.0, &[], &[]), &v1(0.0), 0.1).unwrap();
        assert_eq!(f.as_slice(), &[0.0]);
        let f = eval_barrier_residual(0, &s, &point(0.0, &[], &[]), &v1(1.0), 0.1).unwrap();
        assert_eq!(f.as_slice(), &[1.0]);

        let bounded = half_square().with_ineq(Polynomial::affine(&[(0, 1.0)], -1.0));
        let s = sub(bounded, &[1.0]);
        let f = eval_barrier_residual(0, &s, &point(0.0, &[1.0], &[0.5]), &v1(0.0), 0.5).unwrap();
        // stationarity x + mu, barrier -delta/v + mu, h + v
        assert_eq!(f.as_slice(), &[0.5, 0.0, 0.0]);

        let err = eval_barrier_residual(0, &s, &point(0.0, &[0.0], &[0.5]), &v1(0.0), 0.5);
        assert!(matches!(err, Err(Error::NotInterior { what: "slack", .. })));
    }

    #[test]
    fn assembly_examples() {
        let s = sub(half_square(), &[1.0]);
        let k = assemble_local_kkt(0, &s, &point(0.3, &[], &[])).unwrap();
        assert_eq!(k.matrix, DMatrix::from_element(1, 1, 1.0));

        let bounded = half_square().with_ineq(Polynomial::affine(&[(0, 1.0)], -1.0));
        let s = sub(bounded, &[1.0]);
        let k = assemble_local_kkt(0, &s, &point(0.0, &[1.0], &[1.0])).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(k.matrix, expected);

        let two = half_square()
            .with_ineq(Polynomial::affine(&[(0, 1.0)], -1.0))
            .with_ineq(Polynomial::affine(&[(0, -1.0)], -1.0));
        let s = sub(two, &[1.0]);
        let k = assemble_local_kkt(0, &s, &point(0.0, &[1.0, 2.0], &[2.0, 1.0])).unwrap();
        assert_eq!(k.slack_block_diagonal().as_slice(), &[2.0, 0.5]);
        assert_eq!(k.matrix, k.matrix.transpose());
    }

    fn raw(m: DMatrix<f64>, n_x: usize, n_eq: usize) -> LocalKktMatrix {
        LocalKktMatrix {
            subsystem: 7,
            matrix: m,
            n_x,
            n_eq,
            n_ineq: 0,
        }
    }

    #[test]
    fn factorization_examples() {
        let schedule = RegularizationSchedule::default();
        let f = factorize_local_kkt(&raw(DMatrix::from_element(1, 1, 1.0), 1, 0), &schedule).unwrap();
        assert_eq!(f.regularization, 0.0);

        let saddle = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let f = factorize_local_kkt(&raw(saddle, 1, 1), &schedule).unwrap();
        assert_eq!(f.regularization, 0.0);
        let sol = f.solve(&DVector::from_vec(vec![2.0, 3.0]));
        assert_eq!(sol.as_slice(), &[3.0, 2.0]);

        let f = factorize_local_kkt(&raw(DMatrix::zeros(1, 1), 1, 0), &schedule).unwrap();
        assert!(f.regularization > 0.0);
        assert_eq!(f.regularization, 1e-8);

        // Indefinite but regular: factorized as is.
        let nonconvex = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0]);
        let f = factorize_local_kkt(&raw(nonconvex, 2, 1), &schedule).unwrap();
        assert_eq!(f.regularization, 0.0);

        // Rank-deficient constraint rows cannot be fixed by primal regularization.
        let dependent = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let err = factorize_local_kkt(&raw(dependent, 1, 2), &schedule).unwrap_err();
        assert!(matches!(err, Error::SubsystemFailure { subsystem: 7, .. }));
    }

    #[test]
    fn badly_scaled_but_regular_matrix_needs_no_regularization() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1e11, 1.0, 1.0, 1.0, 0.0]);
        let f = factorize_local_kkt(&raw(m, 2, 1), &RegularizationSchedule::default()).unwrap();
        assert_eq!(f.regularization, 0.0);
    }

    #[test]
    fn schur_examples() {
        let s = sub(half_square(), &[1.0]);
        let p = point(0.0, &[], &[]);
        let f = eval_barrier_residual(0, &s, &p, &v1(0.0), 0.1).unwrap();
        let k = assemble_local_kkt(0, &s, &p).unwrap();
        let fact = factorize_local_kkt(&k, &Default::default()).unwrap();
        let b = v1(2.0);

        let c = compute_schur_contribution(0, &s, &fact, &p, &f, &b, &[2]);
        assert_eq!(c.s_hat, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(c.even_split_rhs(&b, 2).as_slice(), &[-1.0]);
        assert_eq!(c.rhs_hat.as_slice(), &[-1.0]);

        // two identical subsystems: S = 2, s = -2, dlambda = -1
        let total_s = c.lifted_matrix(1) * 2.0;
        let total_rhs = c.even_split_rhs(&b, 2) * 2.0;
        assert_eq!(total_s[(0, 0)], 2.0);
        assert_eq!(total_rhs[0], -2.0);
        let dl = total_rhs[0] / total_s[(0, 0)];
        assert_eq!(dl, -1.0);

        let dp = recover_local_step(&fact, &f, s.coupling(), &v1(dl));
        assert_eq!(dp.as_slice(), &[1.0]);
    }

    #[test]
    fn zero_row_carries_over() {
        let model = PolynomialModel::new(2, Polynomial::quadratic_diag(&[2.0, 1.0], &[0.5, 0.0]));
        let s = sub(model, &[1.0, 0.0, 0.0, 2.0, 0.0, 1.0]);
        let p = LocalPoint {
            x: DVector::from_vec(vec![0.2, -0.1]),
            v: DVector::zeros(0),
            gamma: DVector::zeros(0),
            mu: DVector::zeros(0),
        };
        let lam = DVector::from_vec(vec![0.3, 0.1]);
        let f = eval_barrier_residual(0, &s, &p, &lam, 0.1).unwrap();
        let fact = factorize_local_kkt(&assemble_local_kkt(0, &s, &p).unwrap(), &Default::default()).unwrap();
        let b = DVector::from_vec(vec![1.0, 3.0, -2.0]);
        let c = compute_schur_contribution(0, &s, &fact, &p, &f, &b, &[1, 1]);
        assert_eq!(c.support, vec![0, 2]);
        let full = c.lifted_matrix(3);
        assert!(full.row(1).iter().all(|&v| v == 0.0));
        assert!(full.column(1).iter().all(|&v| v == 0.0));
        assert_eq!(c.even_split_rhs(&b, 4)[1], -3.0 / 4.0);
    }

    #[test]
    fn local_step_examples() {
        let s = sub(half_square(), &[1.0]);
        let p = point(0.0, &[], &[]);
        let fact = factorize_local_kkt(&assemble_local_kkt(0, &s, &p).unwrap(), &Default::default()).unwrap();
        let zero = recover_local_step(&fact, &v1(0.0), s.coupling(), &v1(0.0));
        assert_eq!(zero.as_slice(), &[0.0]);

        let shifted = PolynomialModel::new(1, Polynomial::quadratic_diag(&[1.0], &[-3.0]));
        let s = sub(shifted, &[0.0]);
        let f = eval_barrier_residual(0, &s, &p, &DVector::zeros(0), 0.1).unwrap();
        let fact = factorize_local_kkt(&assemble_local_kkt(0, &s, &p).unwrap(), &Default::default()).unwrap();
        let dp = recover_local_step(&fact, &f, s.coupling(), &DVector::zeros(0));
        assert!((dp[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn local_step_zeroes_its_newton_rows() {
        let model = PolynomialModel::new(2, Polynomial::quadratic_diag(&[2.0, 1.0], &[0.5, 0.0]))
            .with_eq(Polynomial::new(vec![
                crate::poly::Monomial::new(1.0, &[(0, 2)]),
                crate::poly::Monomial::new(1.0, &[(1, 1)]),
                crate::poly::Monomial::new(-1.0, &[]),
            ]))
            .with_ineq(Polynomial::affine(&[(0, 1.0), (1, -1.0)], -0.5));
        let s = sub(model, &[1.0, 1.0]);
        let p = LocalPoint {
            x: DVector::from_vec(vec![0.4, 0.3]),
            v: DVector::from_element(1, 0.7),
            gamma: DVector::from_element(1, 0.2),
            mu: DVector::from_element(1, 0.9),
        };
        let lam = DVector::from_element(1, -0.4);
        let f = eval_barrier_residual(0, &s, &p, &lam, 0.05).unwrap();
        let k = assemble_local_kkt(0, &s, &p).unwrap();
        let fact = factorize_local_kkt(&k, &Default::default()).unwrap();
        let dl = DVector::from_element(1, 0.37);
        let dp = recover_local_step(&fact, &f, s.coupling(), &dl);
        let mut row = &k.matrix * &dp + &f;
        row.rows_mut(0, 2)
            .add_assign_from(&s.coupling().transpose_mul_support(&dl));
        let scale = 1.0 + k.matrix.amax().max(f.amax()).max(dp.amax());
        assert!(row.amax() <= 1e-12 * scale, "{row}");
    }
}
