//! Probability limits by exact enumeration: each estimator's population
//! estimating equation is assembled from pattern-dependent population
//! nuisances and solved by damped Newton. This makes the robustness
//! guarantees executable: a pattern satisfies a sufficient condition
//! exactly when the returned root equals the target parameter.

use super::popnuis::PopNuisances;
use super::Oracle;
use crate::estimators::EstimatorId;
use crate::msm::MsmSpec;
use crate::nuisance::{FStarMode, MisspecPattern};
use crate::solve::{newton_solve, NewtonOptions};
use crate::{Error, Result};

pub(super) fn plim_solve(
    oracle: &Oracle,
    msm: &MsmSpec,
    estimator: EstimatorId,
    pattern: &MisspecPattern,
    fstar: &FStarMode,
) -> Result<Vec<f64>> {
    let nuis = PopNuisances::build(oracle, pattern, fstar)?;
    let j_last = oracle.occasions() - 1;
    let p = msm.dim_beta();

    if estimator == EstimatorId::IvEff {
        // Two stages: the optimal index matrix is frozen at a preliminary
        // consistent root (recomputing it inside the root search makes the
        // residual vanish at infinity, since the second moment grows
        // quadratically in beta).
        let prelim = plim_solve(oracle, msm, EstimatorId::IvMr, pattern, fstar)?;
        let h = oracle.heff_at(&nuis, msm, &prelim)?;
        let result = newton_solve(
            |beta| oracle.fixed_h_residual(&nuis, msm, &h, beta),
            &prelim,
            &NewtonOptions::population(),
        )?;
        if !result.converged {
            return Err(Error::NoRoot {
                message: format!(
                    "population efficient estimating equation stalled at residual {:.3e}",
                    result.residual_norm
                ),
                trace: result.trace,
            });
        }
        return Ok(result.beta);
    }

    let residual = |beta: &[f64]| -> Result<Vec<f64>> {
        let (dsm, _) = oracle.dsm_field(msm, beta);
        let field: Vec<Vec<f64>> = match estimator {
            EstimatorId::SraIpw => (0..oracle.law.n_paths())
                .map(|path| {
                    let w = nuis.inv_sra_prefix[j_last][path];
                    dsm[path].iter().map(|v| v * w).collect()
                })
                .collect(),
            EstimatorId::SraDr => {
                let dtp = oracle.dtp_field(&nuis, &dsm);
                (0..oracle.law.n_paths())
                    .map(|path| {
                        let w = nuis.inv_sra_prefix[j_last][path];
                        dsm[path]
                            .iter()
                            .zip(&dtp[path])
                            .map(|(v, t)| v * w + t)
                            .collect()
                    })
                    .collect()
            }
            EstimatorId::IvIpw => (0..oracle.law.n_paths())
                .map(|path| {
                    let w = nuis.inv_w_prefix[j_last][path];
                    dsm[path].iter().map(|v| v * w).collect()
                })
                .collect(),
            EstimatorId::IvMr => oracle.dagger_field(&nuis, &dsm, None).value,
            EstimatorId::IvEff => unreachable!("handled by the two-stage branch"),
        };
        Ok(oracle.law.mean_vec(&field))
    };

    let result = newton_solve(residual, &vec![0.0; p], &NewtonOptions::population())?;
    if !result.converged {
        return Err(Error::NoRoot {
            message: format!(
                "population estimating equation for {estimator:?} did not reach a root \
                 (residual {:.3e} after {} iterations)",
                result.residual_norm, result.iterations
            ),
            trace: result.trace,
        });
    }
    Ok(result.beta)
}
