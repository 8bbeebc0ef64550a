//! The five estimators and their variances.
//!
//! * `sra_ipw`: solves `P_n[D_sm(h,beta)/W] = 0` with the sequential-
//!   randomization weights (the augmentation-free member of that class).
//! * `sra_dr`: adds the treatment-process augmentation built from the
//!   backward C regressions; consistent if either the weights or the
//!   regressions are right.
//! * `iv_ipw`: solves `P_n[D_sm(h,beta)/W(dagger)] = 0` with the signed
//!   instrument weights.
//! * `iv_mr`: solves `P_n[D(dagger)(h,beta)] = 0` with the sequential
//!   Psi/Gamma augmentation; consistent under any one of the three
//!   nuisance-correctness conditions.
//! * `iv_eff`: the locally efficient member, indexing the transformed
//!   regime-indicator residuals by the within-stratum optimal matrix.
//!
//! Sandwich covariances treat fitted nuisances as known; the nonparametric
//! bootstrap (percentile) is available as the alternative.

use rayon::prelude::*;

use crate::linalg::{weighted_least_squares, Mat};
use crate::msm::{ModelFamily, MsmSpec};
use crate::nuisance::{fit_cj_recursion, FStarMode, MisspecPattern, NuisanceConfig, NuisanceSet};
use crate::panel::Panel;
use crate::solve::{newton_solve, NewtonOptions, NewtonStep};
use crate::util::{domain, quantile, stream_rng};
use crate::weights::{compute_weights, diagnostics_for, WeightDiagnostics, WeightTrack};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    SraIpw,
    SraDr,
    IvIpw,
    IvMr,
    IvEff,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 5] = [
        EstimatorId::SraIpw,
        EstimatorId::SraDr,
        EstimatorId::IvIpw,
        EstimatorId::IvMr,
        EstimatorId::IvEff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorId::SraIpw => "sra_ipw",
            EstimatorId::SraDr => "sra_dr",
            EstimatorId::IvIpw => "iv_ipw",
            EstimatorId::IvMr => "iv_mr",
            EstimatorId::IvEff => "iv_eff",
        }
    }
}

impl std::str::FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<EstimatorId> {
        EstimatorId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator {s:?}")))
    }
}

/// A fitted estimate with its sandwich covariance and solver diagnostics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub estimator: EstimatorId,
    pub beta: Vec<f64>,
    pub covariance: Mat,
    pub std_errors: Vec<f64>,
    pub eq_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n: usize,
    pub nuisance_fingerprint: String,
    pub weight_summary: Option<WeightDiagnostics>,
    pub psi_floor_events: usize,
    pub trace: Vec<NewtonStep>,
}

/// Estimating-function value `D_sm(h = grad g, beta)` for one subject.
pub fn d_sm(msm: &MsmSpec, panel: &Panel, i: usize, beta: &[f64]) -> Vec<f64> {
    let v = panel.v(i);
    let a = panel.a_seq(i);
    let p = msm.dim_beta();
    match msm.family {
        ModelFamily::TerminalMean => {
            let x = msm.design_row(a, &v);
            let resid = panel.y(i) - msm.g(a, &v, beta);
            x.into_iter().map(|xi| xi * resid).collect()
        }
        ModelFamily::RepeatedMeasures => {
            let mut out = vec![0.0; p];
            for m in 1..=panel.occasions() {
                let xm = msm.design_row_at(a, &v, m);
                let resid = panel.y_at(i, m) - msm.g_m(m, a, &v, beta);
                for (o, x) in out.iter_mut().zip(&xm) {
                    *o += x * resid;
                }
            }
            out
        }
    }
}

/// Core root-finding result for a sample estimating equation: damped
/// Newton with forward-difference Jacobian (step 1e-6), infinity-norm
/// tolerance 1e-8, at most 200 iterations.
#[derive(Debug, Clone)]
pub struct SolveCore {
    pub beta: Vec<f64>,
    pub eq_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<NewtonStep>,
    /// Jacobian from the final Newton iteration. The estimating functions
    /// here are affine in beta (linear predictors, linear smoothers), so
    /// this is the exact bread at the root.
    pub jacobian: Option<Mat>,
}

pub fn solve_ee<F>(residual: F, beta_init: &[f64]) -> Result<SolveCore>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let res = newton_solve(residual, beta_init, &NewtonOptions::sample())?;
    Ok(SolveCore {
        beta: res.beta,
        eq_norm: res.residual_norm,
        iterations: res.iterations,
        converged: res.converged,
        trace: res.trace,
        jacobian: res.last_jacobian,
    })
}

/// Bread for the sandwich: the solver's final Jacobian when available,
/// otherwise a fresh forward-difference Jacobian at the root.
fn bread_for<F>(core: &SolveCore, residual: F) -> Result<Mat>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    match &core.jacobian {
        Some(j) => Ok(j.clone()),
        None => fd_jacobian(residual, &core.beta, 1e-6),
    }
}

/// Sandwich covariance `B^{-1} M B^{-T} / n` from per-subject influence
/// values and the bread Jacobian of the mean estimating function;
/// symmetrized to keep it PSD against rounding.
pub fn sandwich(n: usize, influence: &[Vec<f64>], bread: &Mat) -> Result<Mat> {
    let p = bread.nrows();
    let mut meat = Mat::zeros(p, p);
    for u in influence {
        for r in 0..p {
            for c in 0..p {
                meat.add_at(r, c, u[r] * u[c]);
            }
        }
    }
    let meat = meat.scale(1.0 / n as f64);
    let b_inv = bread
        .inverse()
        .map_err(|_| Error::Numeric("singular bread matrix in the sandwich".into()))?;
    Ok(b_inv
        .matmul(&meat)
        .matmul(&b_inv.transpose())
        .scale(1.0 / n as f64)
        .symmetrize())
}

fn fd_jacobian<F>(mut residual: F, beta: &[f64], step: f64) -> Result<Mat>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let p = beta.len();
    let base = residual(beta)?;
    let mut jac = Mat::zeros(p, p);
    for k in 0..p {
        let mut shifted = beta.to_vec();
        shifted[k] += step;
        let r = residual(&shifted)?;
        for i in 0..p {
            jac.set(i, k, (r[i] - base[i]) / step);
        }
    }
    Ok(jac)
}

/// Starting point: least squares weighted by the magnitude of the applied
/// weights.
fn init_wls(panel: &Panel, msm: &MsmSpec, applied: &[f64]) -> Result<Vec<f64>> {
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for i in 0..panel.n() {
        let v = panel.v(i);
        let a = panel.a_seq(i);
        match msm.family {
            ModelFamily::TerminalMean => {
                rows.push(msm.design_row(a, &v));
                ys.push(panel.y(i));
                ws.push(applied[i].abs());
            }
            ModelFamily::RepeatedMeasures => {
                for m in 1..=panel.occasions() {
                    rows.push(msm.design_row_at(a, &v, m));
                    ys.push(panel.y_at(i, m));
                    ws.push(applied[i].abs());
                }
            }
        }
    }
    weighted_least_squares(&rows, &ys, &ws, 1e-10)
}

fn assemble(
    estimator: EstimatorId,
    panel: &Panel,
    nuis: &NuisanceSet,
    core: SolveCore,
    influence: Vec<Vec<f64>>,
    bread: Mat,
    weight_summary: Option<WeightDiagnostics>,
    psi_floor_events: usize,
) -> Result<Estimate> {
    let covariance = sandwich(panel.n(), &influence, &bread)?;
    let std_errors = covariance.diag().iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(Estimate {
        estimator,
        beta: core.beta,
        covariance,
        std_errors,
        eq_norm: core.eq_norm,
        iterations: core.iterations,
        converged: core.converged,
        n: panel.n(),
        nuisance_fingerprint: nuis.fingerprint(),
        weight_summary,
        psi_floor_events,
        trace: core.trace,
    })
}

fn summary_of(track: &WeightTrack, applied: &[f64]) -> Option<WeightDiagnostics> {
    Some(diagnostics_for(applied, track.clamp_events, track.floor_events))
}

/// Mean of per-subject vectors.
fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    let mut out = vec![0.0; p];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    out
}

/// Plain reweighted estimator under sequential randomization.
pub fn fit_ipw_sra(panel: &Panel, msm: &MsmSpec, nuis: &NuisanceSet) -> Result<Estimate> {
    let track = compute_weights(panel, nuis)?;
    let j_last = panel.occasions() - 1;
    let applied: Vec<f64> = (0..panel.n()).map(|i| track.inv_sra_at(i, j_last)).collect();
    let per_subject = |beta: &[f64]| -> Vec<Vec<f64>> {
        (0..panel.n())
            .map(|i| {
                d_sm(msm, panel, i, beta)
                    .into_iter()
                    .map(|v| v * applied[i])
                    .collect()
            })
            .collect()
    };
    let mut residual = |beta: &[f64]| -> Result<Vec<f64>> { Ok(mean_rows(&per_subject(beta))) };
    let init = init_wls(panel, msm, &applied)?;
    let core = solve_ee(&mut residual, &init)?;
    let influence = per_subject(&core.beta);
    let bread = bread_for(&core, &mut residual)?;
    let summary = summary_of(&track, &applied);
    assemble(
        EstimatorId::SraIpw,
        panel,
        nuis,
        core,
        influence,
        bread,
        summary,
        0,
    )
}

/// Doubly robust estimator under sequential randomization: the reweighted
/// term plus the treatment-process augmentation
/// `sum_j [ -R_j/W(j) + sum_a f*(a|V,A(j-1)) R_j(a) / W(j-1) ]`
/// with the C regressions refit at every evaluation of the residual.
pub fn fit_dr_sra(panel: &Panel, msm: &MsmSpec, nuis: &NuisanceSet) -> Result<Estimate> {
    let track = compute_weights(panel, nuis)?;
    let j_last = panel.occasions() - 1;
    let applied: Vec<f64> = (0..panel.n()).map(|i| track.inv_sra_at(i, j_last)).collect();
    let per_subject = |beta: &[f64]| -> Result<Vec<Vec<f64>>> {
        let dsm: Vec<Vec<f64>> = (0..panel.n()).map(|i| d_sm(msm, panel, i, beta)).collect();
        let cj = fit_cj_recursion(panel, nuis, &dsm)?;
        let p = msm.dim_beta();
        Ok((0..panel.n())
            .map(|i| {
                let mut out: Vec<f64> = dsm[i].iter().map(|v| v * applied[i]).collect();
                for j in 0..panel.occasions() {
                    let inv_j = track.inv_sra_at(i, j);
                    let inv_prev = track.inv_sra_before(i, j);
                    let r_now = cj.r_obs(j, i);
                    let r0 = cj.r_arm(0, j, i);
                    let r1 = cj.r_arm(1, j, i);
                    let fs0 = nuis.f_star.prob(panel, i, j, 0, &[]);
                    let fs1 = nuis.f_star.prob(panel, i, j, 1, &[]);
                    for d in 0..p {
                        let avg = fs0 * r0[d] + fs1 * r1[d];
                        out[d] += -r_now[d] * inv_j + avg * inv_prev;
                    }
                }
                out
            })
            .collect())
    };
    let mut residual = |beta: &[f64]| -> Result<Vec<f64>> { Ok(mean_rows(&per_subject(beta)?)) };
    let init = init_wls(panel, msm, &applied)?;
    let core = solve_ee(&mut residual, &init)?;
    let influence = per_subject(&core.beta)?;
    let bread = bread_for(&core, &mut residual)?;
    let summary = summary_of(&track, &applied);
    assemble(
        EstimatorId::SraDr,
        panel,
        nuis,
        core,
        influence,
        bread,
        summary,
        0,
    )
}

/// Reweighted estimator with the signed instrument weights.
pub fn fit_ipw_iv(panel: &Panel, msm: &MsmSpec, nuis: &NuisanceSet) -> Result<Estimate> {
    let track = compute_weights(panel, nuis)?;
    let j_last = panel.occasions() - 1;
    let applied: Vec<f64> = (0..panel.n()).map(|i| track.recip_iv_at(i, j_last)).collect();
    let per_subject = |beta: &[f64]| -> Vec<Vec<f64>> {
        (0..panel.n())
            .map(|i| {
                d_sm(msm, panel, i, beta)
                    .into_iter()
                    .map(|v| v * applied[i])
                    .collect()
            })
            .collect()
    };
    let mut residual = |beta: &[f64]| -> Result<Vec<f64>> { Ok(mean_rows(&per_subject(beta))) };
    let init = init_wls(panel, msm, &applied)?;
    let core = solve_ee(&mut residual, &init)?;
    let bread = bread_for(&core, &mut residual)?;
    bread.check_conditioning(1e12, "reweighted estimating equation Jacobian")?;
    let influence = per_subject(&core.beta);
    let summary = summary_of(&track, &applied);
    assemble(
        EstimatorId::IvIpw,
        panel,
        nuis,
        core,
        influence,
        bread,
        summary,
        0,
    )
}

/// Beta-independent inputs of the influence-function transformation,
/// built once per fit and reused across every residual evaluation.
struct DaggerContext {
    psi_cache: crate::nuisance::PsiCache,
    /// Per `(subject, occasion)`: `f(Z(j)|.)` at the observed instrument.
    fz_obs: Vec<f64>,
    /// Per `(subject, occasion)`: residual `A(j) - E(A(j)|.)`.
    eps: Vec<f64>,
}

impl DaggerContext {
    fn build(panel: &Panel, nuis: &NuisanceSet) -> DaggerContext {
        let n = panel.n();
        let j_count = panel.occasions();
        let mut fz_obs = vec![0.0; n * j_count];
        let mut eps = vec![0.0; n * j_count];
        for i in 0..n {
            for j in 0..j_count {
                fz_obs[i * j_count + j] = nuis.f_z_at(panel, i, j, panel.z(i, j));
                eps[i * j_count + j] = f64::from(panel.a(i, j)) - nuis.mean_a(panel, i, j);
            }
        }
        DaggerContext {
            psi_cache: crate::nuisance::PsiCache::build(panel, nuis),
            fz_obs,
            eps,
        }
    }
}

/// Apply the influence-function transformation to per-subject source
/// vectors:
/// `src/W - sum_j (1/W(j-1)) { s_z Psi_j / f(Z(j)|.) - Gamma1_j }
///  - sum_j eps_j Gamma1_j / (W(j-1) W1(j))`.
/// The Psi regressions are refit on every call (the source depends on
/// beta). Returns the transformed rows and the count of floored
/// instrument effects inside the recursion.
fn transform_dagger(
    panel: &Panel,
    nuis: &NuisanceSet,
    track: &WeightTrack,
    ctx: &DaggerContext,
    source: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, usize)> {
    let psi = crate::nuisance::fit_psi_recursion_cached(panel, nuis, &ctx.psi_cache, source)?;
    let j_count = panel.occasions();
    let j_last = j_count - 1;
    let dim = psi.dim;
    let out = (0..panel.n())
        .map(|i| {
            let inv_w = track.recip_iv_at(i, j_last);
            let mut row: Vec<f64> = source[i].iter().map(|v| v * inv_w).collect();
            for j in 0..j_count {
                let prefix = track.recip_iv_before(i, j);
                let z = panel.z(i, j);
                let sign_z = if z == 1 { 1.0 } else { -1.0 };
                let fz = ctx.fz_obs[i * j_count + j];
                let eps = ctx.eps[i * j_count + j];
                let w1 = track.iv1_at(i, j);
                let g1s = psi.gamma1(j, i);
                let g0s = psi.gamma0(j, i);
                for d in 0..dim {
                    let g1 = g1s[d];
                    let psi_obs = g0s[d] + f64::from(z) * g1;
                    row[d] -= prefix * (sign_z * psi_obs / fz - g1 + eps * g1 / w1);
                }
            }
            row
        })
        .collect();
    Ok((out, psi.floor_events))
}

/// Multiply robust estimator: consistent if any one of (i) correct signed
/// weights, (ii) correct instrument density and Gamma^(1), or (iii) correct
/// Gamma^(1), Gamma^(0) and treatment mean.
pub fn fit_mr_iv(panel: &Panel, msm: &MsmSpec, nuis: &NuisanceSet) -> Result<Estimate> {
    let track = compute_weights(panel, nuis)?;
    let j_last = panel.occasions() - 1;
    let applied: Vec<f64> = (0..panel.n()).map(|i| track.recip_iv_at(i, j_last)).collect();
    let ctx = DaggerContext::build(panel, nuis);
    let per_subject = |beta: &[f64]| -> Result<(Vec<Vec<f64>>, usize)> {
        let dsm: Vec<Vec<f64>> = (0..panel.n()).map(|i| d_sm(msm, panel, i, beta)).collect();
        transform_dagger(panel, nuis, &track, &ctx, &dsm)
    };
    let mut residual = |beta: &[f64]| -> Result<Vec<f64>> { Ok(mean_rows(&per_subject(beta)?.0)) };
    let init = init_wls(panel, msm, &applied)?;
    let core = solve_ee(&mut residual, &init)?;
    let (influence, floor_events) = per_subject(&core.beta)?;
    let bread = bread_for(&core, &mut residual)?;
    let summary = summary_of(&track, &applied);
    assemble(
        EstimatorId::IvMr,
        panel,
        nuis,
        core,
        influence,
        bread,
        summary,
        floor_events,
    )
}

/// Baseline stratum of a subject: the packed bits of its (binary) baseline
/// values, matching the canonical stratum indexing of the enumeration side.
pub fn stratum_of(panel: &Panel, i: usize) -> Result<usize> {
    let v = panel.v(i);
    let mut s = 0usize;
    for (pos, val) in v.iter().enumerate() {
        if *val == 1.0 {
            s |= 1 << pos;
        } else if *val != 0.0 {
            return Err(Error::Estimation(
                "the efficient estimator needs discrete (binary) baseline covariates".into(),
            ));
        }
    }
    Ok(s)
}

/// Locally efficient estimator for the terminal-mean family: transform the
/// regime-indicator residuals, build the within-stratum optimal index
/// `H = E[dXiTilde/dbeta' | V]' (E[XiTilde XiTilde' | V] + ridge)^{-1}`,
/// and solve `P_n[H XiTilde] = 0`.
pub fn fit_efficient_iv(panel: &Panel, msm: &MsmSpec, nuis: &NuisanceSet) -> Result<Estimate> {
    if msm.family != ModelFamily::TerminalMean {
        return Err(Error::Estimation(
            "the efficient estimator is implemented for the terminal-mean family".into(),
        ));
    }
    let j_count = panel.occasions();
    let c_count = 1usize << j_count;
    if c_count > 64 {
        return Err(Error::Estimation("regime count above 64".into()));
    }
    let p = msm.dim_beta();
    let track = compute_weights(panel, nuis)?;
    let j_last = j_count - 1;

    let strata: Vec<usize> = (0..panel.n())
        .map(|i| stratum_of(panel, i))
        .collect::<Result<_>>()?;
    let n_strata = strata.iter().copied().max().unwrap_or(0) + 1;

    let regime_of: Vec<usize> = (0..panel.n())
        .map(|i| crate::panel::regime_index(panel.a_seq(i)))
        .collect();
    let ctx = DaggerContext::build(panel, nuis);

    let tilde_fields = |beta: &[f64]| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> {
        // Regime-indicator residual and its beta-derivative.
        let mut xi = vec![vec![0.0; c_count]; panel.n()];
        let mut xi_jac = vec![vec![0.0; c_count * p]; panel.n()];
        for i in 0..panel.n() {
            let v = panel.v(i);
            let a = panel.a_seq(i);
            let c = regime_of[i];
            xi[i][c] = panel.y(i) - msm.g(a, &v, beta);
            let x = msm.design_row(a, &v);
            for k in 0..p {
                xi_jac[i][c * p + k] = -x[k];
            }
        }
        let (tilde, floors) = transform_dagger(panel, nuis, &track, &ctx, &xi)?;
        let (tilde_jac, _) = transform_dagger(panel, nuis, &track, &ctx, &xi_jac)?;
        Ok((tilde, tilde_jac, floors))
    };

    let eval = |beta: &[f64]| -> Result<(Vec<Vec<f64>>, Vec<Mat>, usize)> {
        let (tilde, tilde_jac, floors) = tilde_fields(beta)?;

        // Within-stratum moments.
        let mut g_mats = vec![Mat::zeros(c_count, p); n_strata];
        let mut s_mats = vec![Mat::zeros(c_count, c_count); n_strata];
        let mut counts = vec![0usize; n_strata];
        for i in 0..panel.n() {
            let s = strata[i];
            counts[s] += 1;
            for r in 0..c_count {
                for k in 0..p {
                    g_mats[s].add_at(r, k, tilde_jac[i][r * p + k]);
                }
                for c2 in 0..c_count {
                    s_mats[s].add_at(r, c2, tilde[i][r] * tilde[i][c2]);
                }
            }
        }
        let mut h_mats = Vec::with_capacity(n_strata);
        for s in 0..n_strata {
            if counts[s] == 0 {
                h_mats.push(Mat::zeros(p, c_count));
                continue;
            }
            let scale = 1.0 / counts[s] as f64;
            let g = g_mats[s].scale(scale);
            let mut gram = s_mats[s].scale(scale);
            gram.add_ridge(crate::oracle::HEFF_RIDGE);
            let inv = gram.inverse().map_err(|_| {
                let missing: Vec<usize> = (0..c_count)
                    .filter(|&c| (0..panel.n()).all(|i| strata[i] != s || regime_of[i] != c))
                    .collect();
                Error::Numeric(format!(
                    "singular within-stratum second moment in stratum {s}; \
                     unobserved regimes: {missing:?}"
                ))
            })?;
            h_mats.push(g.transpose().matmul(&inv));
        }
        let rows: Vec<Vec<f64>> = (0..panel.n())
            .map(|i| h_mats[strata[i]].mul_vec(&tilde[i]))
            .collect();
        Ok((rows, h_mats, floors))
    };

    // Stage one: a preliminary consistent root fixes the index matrix
    // (recomputing it per iterate makes the estimating function shrink at
    // large beta and destabilizes the root search).
    let prelim = fit_mr_iv(panel, msm, nuis)?;
    if !prelim.converged {
        return Err(Error::Estimation(
            "preliminary multiply robust fit did not converge".into(),
        ));
    }
    let (_, h_fixed, _) = eval(&prelim.beta)?;
    let per_subject = |beta: &[f64]| -> Result<(Vec<Vec<f64>>, usize)> {
        let (tilde, _, floors) = tilde_fields(beta)?;
        let rows = (0..panel.n())
            .map(|i| h_fixed[strata[i]].mul_vec(&tilde[i]))
            .collect();
        Ok((rows, floors))
    };
    let mut residual = |beta: &[f64]| -> Result<Vec<f64>> { Ok(mean_rows(&per_subject(beta)?.0)) };
    let core = solve_ee(&mut residual, &prelim.beta)?;
    let (influence, floor_events) = per_subject(&core.beta)?;
    let bread = bread_for(&core, &mut residual)?;
    let applied: Vec<f64> = (0..panel.n()).map(|i| track.recip_iv_at(i, j_last)).collect();
    let summary = summary_of(&track, &applied);
    assemble(
        EstimatorId::IvEff,
        panel,
        nuis,
        core,
        influence,
        bread,
        summary,
        floor_events,
    )
}

/// Everything needed to fit one estimator from a raw panel.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FitSettings {
    pub estimator: EstimatorId,
    pub msm: MsmSpec,
    #[serde(default)]
    pub pattern: MisspecPattern,
    pub fstar: FStarMode,
    #[serde(default)]
    pub config: NuisanceConfig,
}

/// Fit nuisances under the settings' pattern, then the estimator.
pub fn fit_estimator(panel: &Panel, settings: &FitSettings) -> Result<Estimate> {
    settings
        .msm
        .validate(panel.occasions(), panel.v_cols().len())?;
    let nuis = NuisanceSet::fit(panel, &settings.pattern, &settings.fstar, &settings.config)?;
    match settings.estimator {
        EstimatorId::SraIpw => fit_ipw_sra(panel, &settings.msm, &nuis),
        EstimatorId::SraDr => fit_dr_sra(panel, &settings.msm, &nuis),
        EstimatorId::IvIpw => fit_ipw_iv(panel, &settings.msm, &nuis),
        EstimatorId::IvMr => fit_mr_iv(panel, &settings.msm, &nuis),
        EstimatorId::IvEff => fit_efficient_iv(panel, &settings.msm, &nuis),
    }
}

/// Percentile bootstrap over subject resamples; nuisances are refit inside
/// every replicate. Replicate RNG streams derive from `(seed, replicate)`,
/// so the intervals are independent of thread count.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BootstrapCi {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub replicates: usize,
    pub failures: usize,
    pub level: f64,
}

pub fn bootstrap_percentile(
    panel: &Panel,
    settings: &FitSettings,
    replicates: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapCi> {
    use rand::Rng;
    let p = settings.msm.dim_beta();
    let draws: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(seed, domain::BOOTSTRAP, rep as u64);
            let indices: Vec<usize> = (0..panel.n())
                .map(|_| rng.gen_range(0..panel.n()))
                .collect();
            let resampled = panel.resample(&indices);
            fit_estimator(&resampled, settings)
                .ok()
                .filter(|e| e.converged)
                .map(|e| e.beta)
        })
        .collect();

    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    let failures = replicates - ok.len();
    if ok.len() < replicates.max(1) * 9 / 10 {
        return Err(Error::Estimation(format!(
            "bootstrap failed in {failures} of {replicates} replicates"
        )));
    }
    let alpha = (1.0 - level) / 2.0;
    let mut lower = Vec::with_capacity(p);
    let mut upper = Vec::with_capacity(p);
    for k in 0..p {
        let mut xs: Vec<f64> = ok.iter().map(|b| b[k]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lower.push(quantile(&xs, alpha));
        upper.push(quantile(&xs, 1.0 - alpha));
    }
    Ok(BootstrapCi {
        lower,
        upper,
        replicates,
        failures,
        level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, DgpSpec};
    use crate::msm::Feature;

    fn fitted(panel: &Panel) -> NuisanceSet {
        NuisanceSet::fit(
            panel,
            &MisspecPattern::all_correct(),
            &FStarMode::Uniform,
            &NuisanceConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn dsm_hand_cases() {
        // h = (1, sum a), Y = 2, g == 1, A = (1,1) -> (1, 2).
        let panel = Panel::from_parts(
            vec!["s".into()],
            vec!["l".into()],
            vec![0.0, 0.0, 2.0],
            vec![1, 1],
            vec![1, 1],
            vec![2.0],
            2,
            vec![],
            0,
        )
        .unwrap();
        let msm = MsmSpec {
            family: ModelFamily::TerminalMean,
            features: vec![Feature::Intercept, Feature::TreatmentTotal],
        };
        let val = d_sm(&msm, &panel, 0, &[1.0, 0.0]);
        assert_eq!(val, vec![1.0, 2.0]);

        // Exact-fit residual gives the zero vector.
        let beta_fit = [0.0, 1.0];
        let val = d_sm(&msm, &panel, 0, &beta_fit);
        assert_eq!(val, vec![0.0, 0.0]);
    }

    #[test]
    fn dsm_repeated_measures_hand_case() {
        // Two measurement occasions, both residuals 0.5, intercept-only
        // index: the stacked value is 0.5 + 0.5.
        let panel = Panel::from_parts(
            vec!["s".into()],
            vec!["l".into()],
            vec![0.0, 1.0, 1.0],
            vec![0, 1],
            vec![0, 1],
            vec![1.0],
            2,
            vec![],
            0,
        )
        .unwrap();
        let msm = MsmSpec {
            family: ModelFamily::RepeatedMeasures,
            features: vec![Feature::Intercept],
        };
        // y(1) = L(1) = 1, y(2) = Y = 1, g_m = 0.5.
        let val = d_sm(&msm, &panel, 0, &[0.5]);
        assert!((val[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn solve_ee_linear_case_and_no_root() {
        let core = solve_ee(|b| Ok(vec![b[0] - 4.0, b[1] + 1.0]), &[0.0, 0.0]).unwrap();
        assert!(core.converged);
        assert!((core.beta[0] - 4.0).abs() < 1e-7);
        let stuck = solve_ee(|b| Ok(vec![b[0] * b[0] + 1.0]), &[0.2]).unwrap();
        assert!(!stuck.converged);
        assert!(!stuck.trace.is_empty());
    }

    #[test]
    fn sandwich_iid_mean_matches_sample_variance() {
        let ys = [1.0, 2.0, 4.0, 7.0, 11.0];
        let n = ys.len();
        let mean = ys.iter().sum::<f64>() / n as f64;
        // Residual beta - y has root at the mean, influence beta - y_i,
        // bread identity.
        let influence: Vec<Vec<f64>> = ys.iter().map(|y| vec![mean - y]).collect();
        let bread = Mat::identity(1);
        let cov = sandwich(n, &influence, &bread).unwrap();
        let second_moment = ys.iter().map(|y| (mean - y) * (mean - y)).sum::<f64>() / n as f64;
        assert!((cov.at(0, 0) - second_moment / n as f64).abs() < 1e-14);
    }

    #[test]
    fn duplicating_the_panel_halves_the_covariance() {
        let spec = DgpSpec::desk_default();
        let panel = simulate(&spec, 2000, 41).unwrap();
        let doubled = panel.resample(&(0..panel.n()).chain(0..panel.n()).collect::<Vec<_>>());
        let msm = MsmSpec::saturated(2);
        let e1 = fit_ipw_iv(&panel, &msm, &fitted(&panel)).unwrap();
        let e2 = fit_ipw_iv(&doubled, &msm, &fitted(&doubled)).unwrap();
        for r in 0..msm.dim_beta() {
            assert!((e2.beta[r] - e1.beta[r]).abs() < 1e-8);
            let ratio = e2.covariance.at(r, r) / e1.covariance.at(r, r);
            assert!((ratio - 0.5).abs() < 1e-6, "ratio {ratio}");
        }
    }

    #[test]
    fn unit_weights_reduce_to_least_squares() {
        // Constant treatment density equal to the uniform reference makes
        // every weight one; the reweighted fit is then closed-form least
        // squares on the regime design.
        let spec = DgpSpec::desk_default();
        let panel = simulate(&spec, 3000, 43).unwrap();
        let mut nuis = fitted(&panel);
        use crate::nuisance::{CondModel, DesignSpec, ModelForm};
        let constant_half = CondModel {
            time: 0,
            design: DesignSpec {
                l_terms: vec![],
                z_times: vec![],
                a_times: vec![],
            },
            form: ModelForm::Saturated {
                cells: [(0u64, 0.5)].into_iter().collect(),
                fallback: 0.5,
            },
            prob_clamp: None,
        };
        nuis.f_a_sra = vec![constant_half.clone(), constant_half];
        let msm = MsmSpec::saturated(2);
        let est = fit_ipw_sra(&panel, &msm, &nuis).unwrap();
        assert!(est.converged);
        assert!(est.weight_summary.as_ref().unwrap().share_positive == 1.0);

        // Closed form: per-regime outcome means mapped through the product
        // basis (saturated design is invertible).
        let mut sums = [0.0f64; 4];
        let mut counts = [0usize; 4];
        for i in 0..panel.n() {
            let c = crate::panel::regime_index(panel.a_seq(i));
            sums[c] += panel.y(i);
            counts[c] += 1;
        }
        let means: Vec<f64> = (0..4).map(|c| sums[c] / counts[c] as f64).collect();
        let rows: Vec<Vec<f64>> = crate::panel::enumerate_regimes(2)
            .unwrap()
            .iter()
            .map(|r| msm.design_row(r.bits(), &[]))
            .collect();
        let basis = Mat::from_rows(&rows);
        let beta_ls = basis.solve_vec(&means).unwrap();
        for (a, b) in est.beta.iter().zip(&beta_ls) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn perfect_compliance_iv_equals_sra_exactly() {
        let panel = simulate(&DgpSpec::desk_perfect_compliance(), 5000, 47).unwrap();
        let nuis = fitted(&panel);
        let msm = MsmSpec::saturated(2);
        let iv = fit_ipw_iv(&panel, &msm, &nuis).unwrap();
        let sra = fit_ipw_sra(&panel, &msm, &nuis).unwrap();
        assert_eq!(iv.beta, sra.beta);
    }

    #[test]
    fn unknown_estimator_name_is_a_config_error() {
        let err = "banana".parse::<EstimatorId>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!("iv_mr".parse::<EstimatorId>().unwrap(), EstimatorId::IvMr);
    }
}
