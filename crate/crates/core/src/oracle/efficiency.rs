//! The efficient-score construction and enumerated asymptotic variances.
//!
//! With a discrete treatment support, the residual splits over regime
//! indicators: `Xi = eps(beta) (1(A=a_1), ..., 1(A=a_C))'`. Applying the
//! influence-function transformation componentwise gives `XiTilde`, and
//! every influence function in the model is `H(V) XiTilde` for a `p x C`
//! index matrix per baseline stratum. The optimal index is
//! `H_eff = E[d XiTilde / d beta' | V]' E[XiTilde XiTilde' | V]^{-1}`,
//! estimated here by exact enumeration; the asymptotic variance of any
//! member is the sandwich `B^{-1} M B^{-T}` with
//! `B = E[H JacXiTilde]` and `M = E[(H XiTilde)(H XiTilde)']`.

use rand::Rng;

use super::popnuis::PopNuisances;
use super::Oracle;
use crate::linalg::Mat;
use crate::msm::{ModelFamily, MsmSpec};
use crate::nuisance::{FStarMode, MisspecPattern};
use crate::util::{domain, stream_rng};
use crate::{Error, Result};

/// One `p x C` index matrix per baseline stratum.
pub type HByStratum = Vec<Mat>;

/// Gram ridge applied to the within-stratum second-moment matrix.
pub const HEFF_RIDGE: f64 = 1e-8;

pub(super) struct XiFields {
    /// Transformed residual vector per path (length `C`), at the
    /// conditional outcome mean.
    pub value: Vec<Vec<f64>>,
    /// Coefficient of the realized terminal outcome per path.
    pub ycoef: Vec<Vec<f64>>,
    /// `d XiTilde / d beta`, a `C x p` matrix per path, row-major.
    pub jac: Vec<Vec<f64>>,
}

impl Oracle {
    /// Regime-indicator residual fields and their transformation.
    pub(super) fn xi_fields(
        &self,
        nuis: &PopNuisances,
        msm: &MsmSpec,
        beta: &[f64],
    ) -> Result<XiFields> {
        if msm.family != ModelFamily::TerminalMean {
            return Err(Error::Estimation(
                "the efficient construction is implemented for the terminal-mean family".into(),
            ));
        }
        let j_count = self.occasions();
        let c_count = 1usize << j_count;
        let p = msm.dim_beta();
        let n = self.law.n_paths();

        let mut xi_val = vec![vec![0.0; c_count]; n];
        let mut xi_yc = vec![vec![0.0; c_count]; n];
        let mut xi_jac = vec![vec![0.0; c_count * p]; n];
        for path in 0..n {
            let regime = self.path_regime(path);
            let c = crate::panel::regime_index(&regime);
            let v = self.stratum_values(self.stratum_of_path(path));
            let resid = self.law.ey[path] - msm.g(&regime, &v, beta);
            let x = msm.design_row(&regime, &v);
            xi_val[path][c] = resid;
            xi_yc[path][c] = 1.0;
            for k in 0..p {
                xi_jac[path][c * p + k] = -x[k];
            }
        }

        let value_field = self.dagger_field(nuis, &xi_val, Some(&xi_yc));
        let jac_field = self.dagger_field(nuis, &xi_jac, None);
        Ok(XiFields {
            value: value_field.value,
            ycoef: value_field.ycoef,
            jac: jac_field.value,
        })
    }

    /// Within-stratum moments `G_s = E[JacXiTilde | V]` (C x p) and
    /// `S_s = E[XiTilde XiTilde' | V]` (C x C, outcome variance included).
    fn stratum_moments(&self, fields: &XiFields, p: usize) -> (Vec<Mat>, Vec<Mat>, Vec<f64>) {
        let c_count = fields.value.first().map_or(0, Vec::len);
        let n_s = self.n_strata();
        let mut g = vec![Mat::zeros(c_count, p); n_s];
        let mut s = vec![Mat::zeros(c_count, c_count); n_s];
        let mut mass = vec![0.0; n_s];
        for path in 0..self.law.n_paths() {
            let w = self.law.prob[path];
            if w == 0.0 {
                continue;
            }
            let st = self.stratum_of_path(path);
            mass[st] += w;
            let val = &fields.value[path];
            let yc = &fields.ycoef[path];
            let vy = self.law.vy[path];
            for r in 0..c_count {
                for k in 0..p {
                    g[st].add_at(r, k, w * fields.jac[path][r * p + k]);
                }
                for c2 in 0..c_count {
                    s[st].add_at(r, c2, w * (val[r] * val[c2] + vy * yc[r] * yc[c2]));
                }
            }
        }
        for st in 0..n_s {
            if mass[st] > 0.0 {
                g[st] = g[st].scale(1.0 / mass[st]);
                s[st] = s[st].scale(1.0 / mass[st]);
            }
        }
        (g, s, mass)
    }

    /// Population optimal index matrices per stratum at `beta0`. The
    /// enumerated second moment is inverted exactly (the sample estimator
    /// carries a Gram ridge instead).
    pub(super) fn heff_at(
        &self,
        nuis: &PopNuisances,
        msm: &MsmSpec,
        beta: &[f64],
    ) -> Result<HByStratum> {
        let p = msm.dim_beta();
        let fields = self.xi_fields(nuis, msm, beta)?;
        let (g, s, mass) = self.stratum_moments(&fields, p);
        let mut out = Vec::with_capacity(self.n_strata());
        for st in 0..self.n_strata() {
            if mass[st] == 0.0 {
                out.push(Mat::zeros(p, g[st].nrows()));
                continue;
            }
            let inv = s[st].inverse().map_err(|_| {
                let missing: Vec<usize> = (0..g[st].nrows())
                    .filter(|&c| s[st].at(c, c) == 0.0)
                    .collect();
                Error::Numeric(format!(
                    "singular within-stratum second moment in stratum {st}; \
                     regimes with no mass: {missing:?}"
                ))
            })?;
            out.push(g[st].transpose().matmul(&inv));
        }
        Ok(out)
    }

    /// Population estimating-function value `E[H XiTilde(beta)]` for a
    /// fixed index matrix.
    pub(super) fn fixed_h_residual(
        &self,
        nuis: &PopNuisances,
        msm: &MsmSpec,
        h: &HByStratum,
        beta: &[f64],
    ) -> Result<Vec<f64>> {
        let fields = self.xi_fields(nuis, msm, beta)?;
        let p = msm.dim_beta();
        let mut out = vec![0.0; p];
        for path in 0..self.law.n_paths() {
            let w = self.law.prob[path];
            if w == 0.0 {
                continue;
            }
            let st = self.stratum_of_path(path);
            let u = h[st].mul_vec(&fields.value[path]);
            for k in 0..p {
                out[k] += w * u[k];
            }
        }
        Ok(out)
    }
}

pub(super) fn heff(
    oracle: &Oracle,
    msm: &MsmSpec,
    fstar: &FStarMode,
    beta0: &[f64],
) -> Result<HByStratum> {
    let nuis = PopNuisances::build(oracle, &MisspecPattern::all_correct(), fstar)?;
    oracle.heff_at(&nuis, msm, beta0)
}

/// Enumerated sandwich variance of the class member `H(V) XiTilde`.
pub(super) fn avar_h(
    oracle: &Oracle,
    msm: &MsmSpec,
    fstar: &FStarMode,
    beta0: &[f64],
    h: &HByStratum,
) -> Result<Mat> {
    let nuis = PopNuisances::build(oracle, &MisspecPattern::all_correct(), fstar)?;
    let fields = oracle.xi_fields(&nuis, msm, beta0)?;
    let p = msm.dim_beta();
    let mut bread = Mat::zeros(p, p);
    let mut meat = Mat::zeros(p, p);
    for path in 0..oracle.law.n_paths() {
        let w = oracle.law.prob[path];
        if w == 0.0 {
            continue;
        }
        let st = oracle.stratum_of_path(path);
        let hm = &h[st];
        let c_count = hm.ncols();
        // B += w * H Jac
        for r in 0..p {
            for k in 0..p {
                let mut acc = 0.0;
                for c in 0..c_count {
                    acc += hm.at(r, c) * fields.jac[path][c * p + k];
                }
                bread.add_at(r, k, w * acc);
            }
        }
        let u_val = hm.mul_vec(&fields.value[path]);
        let u_yc = hm.mul_vec(&fields.ycoef[path]);
        let vy = oracle.law.vy[path];
        for r in 0..p {
            for k in 0..p {
                meat.add_at(r, k, w * (u_val[r] * u_val[k] + vy * u_yc[r] * u_yc[k]));
            }
        }
    }
    let b_inv = bread.inverse().map_err(|_| {
        Error::Numeric("singular bread in the enumerated sandwich (index matrix degenerate)".into())
    })?;
    Ok(b_inv.matmul(&meat).matmul(&b_inv.transpose()).symmetrize())
}

/// Enumerated sandwich variance of the plain reweighted estimator
/// `D_sm / W`.
pub(super) fn avar_iv_ipw(
    oracle: &Oracle,
    msm: &MsmSpec,
    fstar: &FStarMode,
    beta0: &[f64],
) -> Result<Mat> {
    let nuis = PopNuisances::build(oracle, &MisspecPattern::all_correct(), fstar)?;
    let (dsm, ycoef) = oracle.dsm_field(msm, beta0);
    let jac = oracle.dsm_jacobian_field(msm);
    let j_last = oracle.occasions() - 1;
    let p = msm.dim_beta();
    let mut bread = Mat::zeros(p, p);
    let mut meat = Mat::zeros(p, p);
    for path in 0..oracle.law.n_paths() {
        let w = oracle.law.prob[path];
        if w == 0.0 {
            continue;
        }
        let inv_w = nuis.inv_w_prefix[j_last][path];
        for r in 0..p {
            for k in 0..p {
                bread.add_at(r, k, w * inv_w * jac[path][r * p + k]);
            }
        }
        let vy = oracle.law.vy[path];
        for r in 0..p {
            for k in 0..p {
                meat.add_at(
                    r,
                    k,
                    w * inv_w
                        * inv_w
                        * (dsm[path][r] * dsm[path][k] + vy * ycoef[path][r] * ycoef[path][k]),
                );
            }
        }
    }
    let b_inv = bread
        .inverse()
        .map_err(|_| Error::Numeric("singular bread for the reweighted estimator".into()))?;
    Ok(b_inv.matmul(&meat).matmul(&b_inv.transpose()).symmetrize())
}

/// The index matrices equivalent to `h = grad g`: column `c` of `H(V)` is
/// the design row at regime `a_c`, so `H Xi = grad g * eps = D_sm`.
pub(super) fn h_grad_g(oracle: &Oracle, msm: &MsmSpec) -> Result<HByStratum> {
    let j_count = oracle.occasions();
    let c_count = 1usize << j_count;
    let p = msm.dim_beta();
    let regimes = crate::panel::enumerate_regimes(j_count)?;
    let mut out = Vec::with_capacity(oracle.n_strata());
    for s in 0..oracle.n_strata() {
        let v = oracle.stratum_values(s);
        let mut h = Mat::zeros(p, c_count);
        for (c, regime) in regimes.iter().enumerate() {
            let x = msm.design_row(regime.bits(), &v);
            for r in 0..p {
                h.set(r, c, x[r]);
            }
        }
        out.push(h);
    }
    Ok(out)
}

/// Deterministic random index matrices: perturbations of the `grad g`
/// index, guaranteeing an invertible bread for the comparison set.
pub(super) fn random_h(
    oracle: &Oracle,
    msm: &MsmSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<HByStratum>> {
    let base = h_grad_g(oracle, msm)?;
    let mut out = Vec::with_capacity(count);
    for draw in 0..count {
        let mut rng = stream_rng(seed, domain::DRAW, draw as u64);
        let perturbed: HByStratum = base
            .iter()
            .map(|h| {
                let mut m = h.clone();
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        let noise: f64 = rng.gen_range(-1.0..1.0);
                        m.add_at(r, c, 0.75 * noise);
                    }
                }
                m
            })
            .collect();
        out.push(perturbed);
    }
    Ok(out)
}
