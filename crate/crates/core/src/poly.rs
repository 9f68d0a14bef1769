//! Sparse multivariate polynomials, the built-in function family for
//! problem files.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::problem::LocalModel;

/// `coef * prod_k x[var_k]^pow_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    /// `(variable, exponent)` pairs; a constant term has none.
    #[serde(default)]
    pub powers: Vec<(usize, u32)>,
}

impl Monomial {
    pub fn new(coef: f64, powers: &[(usize, u32)]) -> Self {
        let mut m = Self {
            coef,
            powers: powers.to_vec(),
        };
        m.normalize();
        m
    }

    fn normalize(&mut self) {
        self.powers.sort_unstable();
        let mut merged: Vec<(usize, u32)> = Vec::with_capacity(self.powers.len());
        for &(v, p) in &self.powers {
            match merged.last_mut() {
                Some((lv, lp)) if *lv == v => *lp += p,
                _ => merged.push((v, p)),
            }
        }
        merged.retain(|&(_, p)| p > 0);
        self.powers = merged;
    }

    /// First or second partial derivative with respect to the variables of
    /// factors `first` and `second` (positions in `powers`).
    fn partial(&self, x: &DVector<f64>, first: usize, second: Option<usize>) -> f64 {
        let mut value = self.coef;
        for (k, &(v, p)) in self.powers.iter().enumerate() {
            let mut exp = p as i32;
            let mut factor = 1.0;
            if k == first {
                factor *= exp as f64;
                exp -= 1;
            }
            if Some(k) == second {
                factor *= exp as f64;
                exp -= 1;
            }
            if factor == 0.0 {
                return 0.0;
            }
            value *= factor * x[v].powi(exp);
        }
        value
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.powers
            .iter()
            .fold(self.coef, |acc, &(v, p)| acc * x[v].powi(p as i32))
    }

    pub fn max_var(&self) -> Option<usize> {
        self.powers.iter().map(|&(v, _)| v).max()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(terms: Vec<Monomial>) -> Self {
        let mut p = Self { terms };
        for t in &mut p.terms {
            t.normalize();
        }
        p
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![Monomial::new(c, &[])])
    }

    /// `sum_k coef_k x[var_k] + c`.
    pub fn affine(linear: &[(usize, f64)], c: f64) -> Self {
        let mut terms: Vec<Monomial> = linear.iter().map(|&(v, a)| Monomial::new(a, &[(v, 1)])).collect();
        if c != 0.0 {
            terms.push(Monomial::new(c, &[]));
        }
        Self::new(terms)
    }

    /// `1/2 sum_k d_k x_k^2 + sum_k l_k x_k`.
    pub fn quadratic_diag(diag: &[f64], linear: &[f64]) -> Self {
        let mut terms = Vec::new();
        for (v, &d) in diag.iter().enumerate() {
            if d != 0.0 {
                terms.push(Monomial::new(0.5 * d, &[(v, 2)]));
            }
        }
        for (v, &l) in linear.iter().enumerate() {
            if l != 0.0 {
                terms.push(Monomial::new(l, &[(v, 1)]));
            }
        }
        Self::new(terms)
    }

    /// `1/2 x'Qx + c'x` for symmetric `Q`.
    pub fn quadratic(q: &DMatrix<f64>, c: &DVector<f64>) -> Self {
        let mut terms = Vec::new();
        for i in 0..q.nrows() {
            if q[(i, i)] != 0.0 {
                terms.push(Monomial::new(0.5 * q[(i, i)], &[(i, 2)]));
            }
            for j in i + 1..q.ncols() {
                let w = 0.5 * (q[(i, j)] + q[(j, i)]);
                if w != 0.0 {
                    terms.push(Monomial::new(w, &[(i, 1), (j, 1)]));
                }
            }
            if c[i] != 0.0 {
                terms.push(Monomial::new(c[i], &[(i, 1)]));
            }
        }
        Self::new(terms)
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.terms.iter().map(|t| t.eval(x)).sum()
    }

    pub fn gradient_into(&self, x: &DVector<f64>, weight: f64, out: &mut [f64]) {
        for t in &self.terms {
            for (k, &(v, _)) in t.powers.iter().enumerate() {
                out[v] += weight * t.partial(x, k, None);
            }
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        self.gradient_into(x, 1.0, g.as_mut_slice());
        g
    }

    pub fn hessian_into(&self, x: &DVector<f64>, weight: f64, out: &mut DMatrix<f64>) {
        if weight == 0.0 {
            return;
        }
        for t in &self.terms {
            for (k, &(vk, _)) in t.powers.iter().enumerate() {
                for (l, &(vl, _)) in t.powers.iter().enumerate().skip(k) {
                    let d = weight * t.partial(x, k, Some(l));
                    out[(vk, vl)] += d;
                    if k != l {
                        out[(vl, vk)] += d;
                    }
                }
            }
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        self.terms.iter().filter_map(Monomial::max_var).max()
    }
}

/// Local model whose objective and constraints are all polynomials.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialModel {
    pub dim: usize,
    pub objective: Polynomial,
    pub eq: Vec<Polynomial>,
    pub ineq: Vec<Polynomial>,
}

impl PolynomialModel {
    pub fn new(dim: usize, objective: Polynomial) -> Self {
        Self {
            dim,
            objective,
            eq: Vec::new(),
            ineq: Vec::new(),
        }
    }

    pub fn with_eq(mut self, g: Polynomial) -> Self {
        self.eq.push(g);
        self
    }

    pub fn with_ineq(mut self, h: Polynomial) -> Self {
        self.ineq.push(h);
        self
    }

    /// Largest variable index referenced, for validation against `dim`.
    pub fn max_var(&self) -> Option<usize> {
        std::iter::once(&self.objective)
            .chain(&self.eq)
            .chain(&self.ineq)
            .filter_map(Polynomial::max_var)
            .max()
    }

    fn jacobian(&self, rows: &[Polynomial], x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(rows.len(), self.dim);
        let mut buf = vec![0.0; self.dim];
        for (r, p) in rows.iter().enumerate() {
            buf.iter_mut().for_each(|b| *b = 0.0);
            p.gradient_into(x, 1.0, &mut buf);
            for (c, &v) in buf.iter().enumerate() {
                j[(r, c)] = v;
            }
        }
        j
    }
}

impl LocalModel for PolynomialModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_eq(&self) -> usize {
        self.eq.len()
    }

    fn n_ineq(&self) -> usize {
        self.ineq.len()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        self.objective.eval(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.objective.gradient(x)
    }

    fn eq(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.eq.len(), self.eq.iter().map(|p| p.eval(x)))
    }

    fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.ineq.len(), self.ineq.iter().map(|p| p.eval(x)))
    }

    fn eq_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.jacobian(&self.eq, x))
    }

    fn ineq_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.jacobian(&self.ineq, x))
    }

    fn lagrangian_hessian(&self, x: &DVector<f64>, gamma: &DVector<f64>, mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        self.objective.hessian_into(x, 1.0, &mut h);
        for (p, &w) in self.eq.iter().zip(gamma.iter()) {
            p.hessian_into(x, w, &mut h);
        }
        for (p, &w) in self.ineq.iter().zip(mu.iter()) {
            p.hessian_into(x, w, &mut h);
        }
        Some(h)
    }
}
