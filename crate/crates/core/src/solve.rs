//! Damped Newton root finding for systems of estimating equations.
//!
//! The residual functions here are smooth and near-linear in the parameter
//! (mean functions are linear predictors), so a forward-difference Jacobian
//! with step halving is enough. Both the sample solvers and the
//! population-limit solver share this routine; they differ only in options.

use crate::linalg::{inf_norm, Mat};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Forward-difference step for the Jacobian.
    pub fd_step: f64,
    /// Convergence tolerance on the residual infinity norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Maximum number of step halvings per iteration.
    pub max_halvings: usize,
    /// Reject iterates with any coordinate beyond this bound.
    pub region_bound: f64,
}

impl NewtonOptions {
    /// Sample estimating equations: tolerance 1e-8, step 1e-6, 200 iterations.
    pub fn sample() -> Self {
        NewtonOptions {
            fd_step: 1e-6,
            tol: 1e-8,
            max_iter: 200,
            max_halvings: 30,
            region_bound: 1e6,
        }
    }

    /// Population estimating equations solved by enumeration: tighter
    /// tolerance so roots are good to 1e-8 in the parameter, search region
    /// bounded at 50 in the infinity norm.
    pub fn population() -> Self {
        NewtonOptions {
            fd_step: 1e-6,
            tol: 1e-12,
            max_iter: 200,
            max_halvings: 30,
            region_bound: 50.0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NewtonStep {
    pub iteration: usize,
    pub beta: Vec<f64>,
    pub residual_norm: f64,
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub beta: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<NewtonStep>,
    /// Jacobian from the last Newton iteration, reusable as the sandwich
    /// bread when the residual is (near-)affine.
    pub last_jacobian: Option<Mat>,
}

/// Find a root of `f` starting from `beta0`.
///
/// Returns `Ok` with `converged = false` when the iteration stalls inside
/// the region (callers decide whether that is an error), and `Err(NoRoot)`
/// when iterates leave the search region entirely.
pub fn newton_solve<F>(mut f: F, beta0: &[f64], opts: &NewtonOptions) -> Result<NewtonResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let p = beta0.len();
    let mut beta = beta0.to_vec();
    let mut resid = f(&beta)?;
    let mut norm = inf_norm(&resid);
    let mut trace = vec![NewtonStep {
        iteration: 0,
        beta: beta.clone(),
        residual_norm: norm,
    }];
    let mut last_jacobian: Option<Mat> = None;

    for iter in 1..=opts.max_iter {
        if norm <= opts.tol {
            return Ok(NewtonResult {
                beta,
                residual_norm: norm,
                iterations: iter - 1,
                converged: true,
                trace,
                last_jacobian,
            });
        }

        // Forward-difference Jacobian, column by column.
        let mut jac = Mat::zeros(p, p);
        for k in 0..p {
            let mut shifted = beta.clone();
            shifted[k] += opts.fd_step;
            let r = f(&shifted)?;
            for i in 0..p {
                jac.set(i, k, (r[i] - resid[i]) / opts.fd_step);
            }
        }
        let neg: Vec<f64> = resid.iter().map(|r| -r).collect();
        let step = jac.solve_vec(&neg).map_err(|e| Error::NoRoot {
            message: format!("Jacobian solve failed at iteration {iter}: {e}"),
            trace: trace.clone(),
        })?;
        last_jacobian = Some(jac);

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = beta
                .iter()
                .zip(&step)
                .map(|(b, s)| b + scale * s)
                .collect();
            if inf_norm(&cand) > opts.region_bound {
                scale *= 0.5;
                continue;
            }
            let cand_res = f(&cand)?;
            let cand_norm = inf_norm(&cand_res);
            if cand_norm < norm || cand_norm <= opts.tol {
                beta = cand;
                resid = cand_res;
                norm = cand_norm;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        trace.push(NewtonStep {
            iteration: iter,
            beta: beta.clone(),
            residual_norm: norm,
        });
        if !accepted {
            return Ok(NewtonResult {
                beta,
                residual_norm: norm,
                iterations: iter,
                converged: norm <= opts.tol,
                trace,
                last_jacobian,
            });
        }
    }

    let converged = norm <= opts.tol;
    Ok(NewtonResult {
        beta,
        residual_norm: norm,
        iterations: opts.max_iter,
        converged,
        trace,
        last_jacobian,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_residual_converges_in_one_step() {
        let target = [3.0, -2.0];
        let res = newton_solve(
            |b| Ok(vec![b[0] - target[0], b[1] - target[1]]),
            &[0.0, 0.0],
            &NewtonOptions::sample(),
        )
        .unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
        assert!((res.beta[0] - 3.0).abs() < 1e-7);
        assert!((res.beta[1] + 2.0).abs() < 1e-7);
    }

    #[test]
    fn rootless_residual_reports_non_convergence() {
        // f(b) = b^2 + 1 has no real root; Newton must stall, not lie.
        let res = newton_solve(
            |b| Ok(vec![b[0] * b[0] + 1.0]),
            &[0.5],
            &NewtonOptions {
                max_iter: 50,
                ..NewtonOptions::sample()
            },
        )
        .unwrap();
        assert!(!res.converged);
        assert!(!res.trace.is_empty());
    }

    #[test]
    fn mildly_nonlinear_system_converges() {
        let res = newton_solve(
            |b| Ok(vec![b[0].tanh() - 0.5, b[1] + 0.1 * b[0] - 1.0]),
            &[0.0, 0.0],
            &NewtonOptions::population(),
        )
        .unwrap();
        assert!(res.converged);
        assert!((res.beta[0].tanh() - 0.5).abs() < 1e-10);
    }
}
