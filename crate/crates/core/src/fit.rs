//! Small least-squares helpers: straight lines and a dense
//! Levenberg-Marquardt loop for problems with a handful of parameters.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub rms_residual: f64,
}

/// Ordinary least-squares line through `(x, y)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit, FitError> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(FitError::TooFewPoints { need: 2, got: n.min(y.len()) });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(FitError::Degenerate("all x equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_stderr = if n > 2 { (ss / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(LineFit { slope, intercept, slope_stderr, rms_residual: (ss / nf).sqrt() })
}

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the relative parameter step falls below this.
    pub step_tol: f64,
    /// Stop when the relative cost decrease falls below this.
    pub cost_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 200, step_tol: 1e-14, cost_tol: 1e-20 }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl LmResult {
    pub fn rms(&self) -> f64 {
        let n = self.residuals.len().max(1) as f64;
        (self.residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt()
    }
}

/// Minimise `sum r_i(p)^2`. `residual` fills `r` and the Jacobian
/// `jac[(i, k)] = d r_i / d p_k`; returning `false` marks `p` infeasible.
pub fn levenberg_marquardt<F>(
    initial: &[f64],
    n_residuals: usize,
    opts: &LmOptions,
    mut residual: F,
) -> Result<LmResult, FitError>
where
    F: FnMut(&[f64], &mut DVector<f64>, &mut DMatrix<f64>) -> bool,
{
    let np = initial.len();
    if n_residuals < np {
        return Err(FitError::TooFewPoints { need: np, got: n_residuals });
    }
    let mut p = initial.to_vec();
    let mut r = DVector::zeros(n_residuals);
    let mut jac = DMatrix::zeros(n_residuals, np);
    if !residual(&p, &mut r, &mut jac) {
        return Err(FitError::Degenerate("infeasible starting point".into()));
    }
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut trial_r = DVector::zeros(n_residuals);
    let mut trial_j = DMatrix::zeros(n_residuals, np);

    for iter in 1..=opts.max_iterations {
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * &r;
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for k in 0..np {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if trial.iter().all(|v| v.is_finite()) && residual(&trial, &mut trial_r, &mut trial_j) {
                let trial_cost = trial_r.norm_squared();
                if trial_cost <= cost {
                    let rel_step = step.norm() / (DVector::from_column_slice(&p).norm() + 1e-300);
                    let rel_cost = (cost - trial_cost) / cost.max(1e-300);
                    p = trial;
                    std::mem::swap(&mut r, &mut trial_r);
                    std::mem::swap(&mut jac, &mut trial_j);
                    cost = trial_cost;
                    lambda = (lambda * 0.3).max(1e-12);
                    accepted = true;
                    if rel_step < opts.step_tol || rel_cost < opts.cost_tol || cost == 0.0 {
                        return Ok(LmResult { params: p, residuals: r.iter().copied().collect(), iterations: iter });
                    }
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !accepted {
            // no downhill step exists at machine precision: a minimum
            if g.norm() <= 1e-8 * (1.0 + cost.sqrt()) * (1.0 + jac.norm()) || lambda > 1e16 {
                return Ok(LmResult { params: p, residuals: r.iter().copied().collect(), iterations: iter });
            }
            return Err(FitError::NoConvergence(iter));
        }
    }
    Err(FitError::NoConvergence(opts.max_iterations))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 0.25 * v - 1.0).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope - 0.25).abs() < 1e-15);
        assert!((f.intercept + 1.0).abs() < 1e-15);
        assert!(f.slope_stderr < 1e-15);
    }

    #[test]
    fn line_needs_spread() {
        assert!(matches!(fit_line(&[1.0, 1.0], &[0.0, 1.0]), Err(FitError::Degenerate(_))));
        assert!(matches!(fit_line(&[1.0], &[0.0]), Err(FitError::TooFewPoints { .. })));
    }

    #[test]
    fn lm_exponential_decay() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.2).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * (-1.3 * x).exp()).collect();
        let res = levenberg_marquardt(&[1.0, 0.5], xs.len(), &LmOptions::default(), |p, r, j| {
            for (i, (&x, &y)) in xs.iter().zip(&ys).enumerate() {
                let e = (-p[1] * x).exp();
                r[i] = p[0] * e - y;
                j[(i, 0)] = e;
                j[(i, 1)] = -p[0] * x * e;
            }
            true
        })
        .unwrap();
        assert!((res.params[0] - 3.0).abs() < 1e-10);
        assert!((res.params[1] - 1.3).abs() < 1e-10);
    }
}
