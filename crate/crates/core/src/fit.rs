//! Least-squares helpers shared by the curve fits.

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{storage::Owned, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Condition number above which a design matrix counts as rank deficient.
pub const MAX_CONDITION: f64 = 1e12;

pub(crate) type Jacobian<'a> = &'a dyn Fn(&[f64], &mut DMatrix<f64>);

#[derive(Debug, Clone)]
pub(crate) struct NlsResult {
    pub params: Vec<f64>,
    /// s²·(JᵀJ)⁻¹ with s² = RSS / (m − n).
    pub covariance: DMatrix<f64>,
    pub rss: f64,
}

impl NlsResult {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.params.len()).map(|i| self.covariance[(i, i)].max(0.0).sqrt()).collect()
    }
}

struct Problem<'a, R> {
    x: DVector<f64>,
    m: usize,
    residual: R,
    jacobian: Option<Jacobian<'a>>,
}

impl<R: Fn(&[f64], &mut [f64])> Problem<'_, R> {
    fn eval(&self, x: &[f64]) -> Option<DVector<f64>> {
        let mut r = DVector::zeros(self.m);
        (self.residual)(x, r.as_mut_slice());
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jac(&self) -> Option<DMatrix<f64>> {
        let n = self.x.len();
        let mut j = DMatrix::zeros(self.m, n);
        if let Some(analytic) = self.jacobian {
            analytic(self.x.as_slice(), &mut j);
        } else {
            let mut x = self.x.clone();
            for k in 0..n {
                let h = 1e-7 * x[k].abs().max(1e-7);
                let orig = x[k];
                x[k] = orig + h;
                let up = self.eval(x.as_slice())?;
                x[k] = orig - h;
                let down = self.eval(x.as_slice())?;
                x[k] = orig;
                j.set_column(k, &((up - down) / (2.0 * h)));
            }
        }
        j.iter().all(|v| v.is_finite()).then_some(j)
    }
}

impl<R: Fn(&[f64], &mut [f64])> LeastSquaresProblem<f64, Dyn, Dyn> for Problem<'_, R> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.x.copy_from(x);
    }

    fn params(&self) -> DVector<f64> {
        self.x.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        self.eval(self.x.as_slice())
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        self.jac()
    }
}

/// Levenberg-Marquardt on `residual(params, out)`. Parameters should be
/// pre-scaled to order one.
pub(crate) fn nonlinear_least_squares<R>(
    x0: &[f64],
    residual_count: usize,
    residual: R,
    jacobian: Option<Jacobian<'_>>,
) -> Result<NlsResult>
where
    R: Fn(&[f64], &mut [f64]),
{
    let n = x0.len();
    if residual_count <= n {
        return Err(Error::InsufficientData { needed: n + 1, got: residual_count });
    }
    let problem = Problem { x: DVector::from_column_slice(x0), m: residual_count, residual, jacobian };
    let solver = LevenbergMarquardt::new().with_tol(1e-14).with_patience(400);
    let (problem, report) = solver.minimize(problem);
    if !report.termination.was_successful() {
        return Err(Error::NonConvergence(format!("{:?}", report.termination)));
    }
    let r = problem.residuals().ok_or_else(|| Error::NonConvergence("non-finite residuals".into()))?;
    let j = problem.jacobian().ok_or_else(|| Error::NonConvergence("non-finite Jacobian".into()))?;
    let rss = r.norm_squared();
    let jtj = j.transpose() * &j;
    let inv = pseudo_inverse_checked(&jtj)?;
    let s2 = rss / (residual_count - n) as f64;
    Ok(NlsResult { params: problem.x.as_slice().to_vec(), covariance: inv * s2, rss })
}

fn pseudo_inverse_checked(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    // Symmetric scaling keeps the condition estimate meaningful when
    // parameters differ wildly in magnitude.
    let d: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)].abs().sqrt().max(f64::MIN_POSITIVE)).collect();
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / (d[i] * d[j]));
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > MAX_CONDITION * MAX_CONDITION {
        return Err(Error::RankDeficient { condition });
    }
    let inv = svd.pseudo_inverse(0.0).map_err(|e| Error::NonConvergence(e.to_string()))?;
    Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| inv[(i, j)] / (d[i] * d[j])))
}

#[derive(Debug, Clone)]
pub(crate) struct LinearFit {
    pub coefficients: Vec<f64>,
}

/// Weighted linear least squares `min Σ wᵢ (Aᵢ·c − bᵢ)²` via SVD on the
/// column-equilibrated design. Rejects designs with condition > [`MAX_CONDITION`].
pub(crate) fn linear_least_squares(design: &DMatrix<f64>, rhs: &[f64], weights: Option<&[f64]>) -> Result<LinearFit> {
    let (m, n) = design.shape();
    if m < n {
        return Err(Error::InsufficientData { needed: n, got: m });
    }
    let sw: Vec<f64> = match weights {
        Some(w) => w.iter().map(|v| v.max(0.0).sqrt()).collect(),
        None => vec![1.0; m],
    };
    let mut a = DMatrix::from_fn(m, n, |i, j| design[(i, j)] * sw[i]);
    let b = DVector::from_iterator(m, rhs.iter().zip(&sw).map(|(v, s)| v * s));
    let scale: Vec<f64> = (0..n)
        .map(|j| {
            let c = a.column(j).norm();
            if c > 0.0 {
                c
            } else {
                1.0
            }
        })
        .collect();
    for (j, s) in scale.iter().enumerate() {
        a.column_mut(j).unscale_mut(*s);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(Error::RankDeficient { condition });
    }
    let x = svd.solve(&b, 0.0).map_err(|e| Error::NonConvergence(e.to_string()))?;
    let coefficients = x.iter().zip(&scale).map(|(v, s)| v / s).collect();
    Ok(LinearFit { coefficients })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_exact_line() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 1e-6).collect();
        let a = DMatrix::from_fn(20, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let b: Vec<f64> = xs.iter().map(|x| 3.0 - 2e5 * x).collect();
        let fit = linear_least_squares(&a, &b, None).unwrap();
        assert!((fit.coefficients[0] - 3.0).abs() < 1e-12);
        assert!((fit.coefficients[1] + 2e5).abs() < 1e-6);
    }

    #[test]
    fn linear_fit_detects_collinear_columns() {
        let a = DMatrix::from_fn(10, 2, |i, _| i as f64);
        let b = vec![1.0; 10];
        assert!(matches!(linear_least_squares(&a, &b, None), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn nls_exponential_decay() {
        let ts: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 2.0 * (-1.3 * t).exp()).collect();
        let res = nonlinear_least_squares(
            &[1.0, 1.0],
            ts.len(),
            |p: &[f64], r: &mut [f64]| {
                for ((ri, t), y) in r.iter_mut().zip(&ts).zip(&ys) {
                    *ri = p[0] * (-p[1] * t).exp() - y;
                }
            },
            None,
        )
        .unwrap();
        assert!((res.params[0] - 2.0).abs() < 1e-8);
        assert!((res.params[1] - 1.3).abs() < 1e-8);
    }
}
