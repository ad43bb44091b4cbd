//! Cross-sectional least squares used as the conditional expectation
//! operator of the backward schemes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Polynomial feature basis with ridge regularisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionBasis {
    pub degree: usize,
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 2,
            ridge: 1e-8,
        }
    }
}

impl RegressionBasis {
    pub fn new(degree: usize, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::Precondition(format!("ridge must be >= 0, got {ridge}")));
        }
        Ok(Self { degree, ridge })
    }
}

/// Exponent vectors of all monomials of total degree `1..=degree` in `n_vars`
/// variables, in graded lexicographic order.
fn monomials(n_vars: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(var: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if var == cur.len() {
            if cur.iter().sum::<usize>() > 0 {
                out.push(cur.clone());
            }
            return;
        }
        for e in (0..=left).rev() {
            cur[var] = e;
            rec(var + 1, left - e, cur, out);
        }
        cur[var] = 0;
    }
    let mut out = Vec::new();
    for d in 1..=degree {
        let mut level = Vec::new();
        rec(0, d, &mut vec![0; n_vars], &mut level);
        level.retain(|m| m.iter().sum::<usize>() == d);
        out.extend(level);
    }
    out
}

/// A fitted least-squares projector onto the span of the basis features of
/// one cross-section. Reusable for any number of right-hand sides.
#[derive(Debug, Clone)]
pub struct Projector {
    /// Standardised feature columns (intercept excluded).
    columns: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    n: usize,
}

impl Projector {
    /// Fits the projector on raw state variables `vars` (each of length `n`).
    /// Near-constant feature columns are dropped; the intercept is always
    /// kept. `step` only labels errors.
    pub fn fit(vars: &[&[f64]], basis: &RegressionBasis, step: usize) -> Result<Self> {
        let n = vars.first().map(|v| v.len()).unwrap_or(0);
        if n == 0 {
            return Err(Error::Shape("regression needs at least one sample".into()));
        }
        if vars.iter().any(|v| v.len() != n) {
            return Err(Error::Shape("regression variables differ in length".into()));
        }
        let mut columns = Vec::new();
        for mono in monomials(vars.len(), basis.degree) {
            let mut col = vec![1.0; n];
            for (v, &e) in vars.iter().zip(&mono) {
                for _ in 0..e {
                    for (c, x) in col.iter_mut().zip(v.iter()) {
                        *c *= x;
                    }
                }
            }
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if !(sd > 1e-10 * mean.abs().max(1.0)) {
                continue;
            }
            for c in col.iter_mut() {
                *c = (*c - mean) / sd;
            }
            columns.push(col);
        }
        let p = columns.len() + 1;
        let nf = n as f64;
        let mut gram = DMatrix::<f64>::zeros(p, p);
        gram[(0, 0)] = 1.0;
        for a in 0..columns.len() {
            let ca = &columns[a];
            gram[(0, a + 1)] = ca.iter().sum::<f64>() / nf;
            gram[(a + 1, 0)] = gram[(0, a + 1)];
            for b in a..columns.len() {
                let s = ca.iter().zip(&columns[b]).map(|(x, y)| x * y).sum::<f64>() / nf;
                gram[(a + 1, b + 1)] = s;
                gram[(b + 1, a + 1)] = s;
            }
        }
        for d in 1..p {
            gram[(d, d)] += basis.ridge;
        }
        let chol = Cholesky::new(gram).ok_or(Error::RankDeficient {
            step,
            features: p,
            ridge: basis.ridge,
        })?;
        Ok(Self { columns, chol, n })
    }

    /// Number of basis functions including the intercept.
    pub fn n_features(&self) -> usize {
        self.columns.len() + 1
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    fn coefficients(&self, y: &[f64]) -> DVector<f64> {
        let nf = self.n as f64;
        let mut rhs = DVector::<f64>::zeros(self.n_features());
        rhs[0] = y.iter().sum::<f64>() / nf;
        for (a, col) in self.columns.iter().enumerate() {
            rhs[a + 1] = col.iter().zip(y).map(|(x, v)| x * v).sum::<f64>() / nf;
        }
        self.chol.solve(&rhs)
    }

    /// Fitted values of `y` on the features.
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n, "right-hand side length");
        let beta = self.coefficients(y);
        let mut out = vec![beta[0]; self.n];
        for (a, col) in self.columns.iter().enumerate() {
            let b = beta[a + 1];
            for (o, x) in out.iter_mut().zip(col) {
                *o += b * x;
            }
        }
        out
    }

    /// Fitted values and the approximate standard error of a fitted value,
    /// `sqrt(mean residual^2 * p / n)`.
    pub fn project_with_se(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let fit = self.project(y);
        let rss = y.iter().zip(&fit).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let se = (rss / self.n as f64 * self.n_features() as f64 / self.n as f64).sqrt();
        (fit, se)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 2).len(), 2);
        assert_eq!(monomials(2, 2).len(), 5);
        assert_eq!(monomials(3, 3).len(), 19);
        assert_eq!(monomials(2, 0).len(), 0);
    }

    #[test]
    fn exact_quadratic_is_reproduced() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 10.0 - 2.5).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v).collect();
        let proj = Projector::fit(&[&x], &RegressionBasis::new(2, 0.0).unwrap(), 0).unwrap();
        let (fit, se) = proj.project_with_se(&y);
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(se < 1e-10);
    }

    #[test]
    fn constant_features_reduce_to_mean() {
        let x = vec![3.0; 8];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let proj = Projector::fit(&[&x], &RegressionBasis::default(), 0).unwrap();
        assert_eq!(proj.n_features(), 1);
        assert!(proj.project(&y).iter().all(|v| (v - 4.5).abs() < 1e-12));
    }

    #[test]
    fn collinear_without_ridge_is_rank_deficient() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = Projector::fit(&[&x, &x2], &RegressionBasis::new(1, 0.0).unwrap(), 7).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { step: 7, .. }));
        assert!(Projector::fit(&[&x, &x2], &RegressionBasis::new(1, 1e-8).unwrap(), 7).is_ok());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_linear(
            xs in prop::collection::vec(-3.0f64..3.0, 12..40),
            a in -2.0f64..2.0,
        ) {
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
            prop_assume!(sorted.len() >= 4);
            let y: Vec<f64> = xs.iter().map(|v| (v * 1.7).sin()).collect();
            let z: Vec<f64> = xs.iter().map(|v| v.abs()).collect();
            let proj = Projector::fit(&[&xs], &RegressionBasis::new(2, 0.0).unwrap(), 0).unwrap();
            let py = proj.project(&y);
            let ppy = proj.project(&py);
            for (u, v) in py.iter().zip(&ppy) {
                prop_assert!((u - v).abs() < 1e-7 * (1.0 + u.abs()));
            }
            let comb: Vec<f64> = y.iter().zip(&z).map(|(u, v)| u + a * v).collect();
            let pz = proj.project(&z);
            for ((c, u), v) in proj.project(&comb).iter().zip(&py).zip(&pz) {
                prop_assert!((c - (u + a * v)).abs() < 1e-8 * (1.0 + c.abs()));
            }
        }
    }
}
