//! Exact population-level computations by enumeration over a discrete
//! data-generating process: counterfactual means and the true target
//! parameter, executable identity checks (the instrument-contrast identity,
//! the weighted-moment identity, influence-function mean zero), probability
//! limits of every estimator under nuisance misspecification, and
//! enumerated asymptotic variances for the efficiency comparisons.
//!
//! Observed paths pack `(L(j), Z(j), A(j))` into three bits per occasion;
//! everything population-level is a vector indexed by observed path, and
//! conditional expectations are projections onto masked path bits.

mod counterfactual;
mod efficiency;
mod identities;
mod inject;
mod plim;
mod popnuis;

pub use counterfactual::brute_force_regime_mean;
pub use efficiency::{HByStratum, HEFF_RIDGE};
pub use identities::{weighted_moment_battery, TestFn};
pub use popnuis::PopNuisances;

use std::collections::BTreeSet;

use crate::dgp::{conditional_tables, DgpSpec, JointLaw, Var};
use crate::estimators::EstimatorId;
use crate::linalg::Mat;
use crate::msm::MsmSpec;
use crate::nuisance::{FStarMode, MisspecPattern};
use crate::{Error, Result};

#[inline]
pub(crate) fn l_bit(j: usize) -> usize {
    3 * j
}

#[inline]
pub(crate) fn z_bit(j: usize) -> usize {
    3 * j + 1
}

#[inline]
pub(crate) fn a_bit(j: usize) -> usize {
    3 * j + 2
}

#[inline]
pub(crate) fn bit(path: usize, b: usize) -> u8 {
    ((path >> b) & 1) as u8
}

/// The observed-data law: marginal probability of every `(L,Z,A)` path plus
/// the conditional mean and variance of the terminal outcome on each path.
#[derive(Debug, Clone)]
pub struct ObservedLaw {
    pub occasions: usize,
    pub prob: Vec<f64>,
    /// `E(Y | path)`.
    pub ey: Vec<f64>,
    /// `Var(Y | path)` = outcome noise plus latent-confounder mixture.
    pub vy: Vec<f64>,
}

impl ObservedLaw {
    pub fn from_joint(joint: &JointLaw) -> ObservedLaw {
        let j_count = joint.occasions;
        let n_obs = 1usize << (3 * j_count);
        let mut prob = vec![0.0; n_obs];
        let mut m1 = vec![0.0; n_obs];
        let mut m2 = vec![0.0; n_obs];
        for path in 0..joint.n_paths() {
            let mut obs = 0usize;
            for j in 0..j_count {
                obs |= usize::from(JointLaw::bit(path, Var::l(j))) << l_bit(j);
                obs |= usize::from(JointLaw::bit(path, Var::z(j))) << z_bit(j);
                obs |= usize::from(JointLaw::bit(path, Var::a(j))) << a_bit(j);
            }
            let p = joint.prob[path];
            let mu = joint.mean_y[path];
            prob[obs] += p;
            m1[obs] += p * mu;
            m2[obs] += p * mu * mu;
        }
        let mut ey = vec![0.0; n_obs];
        let mut vy = vec![0.0; n_obs];
        for path in 0..n_obs {
            if prob[path] > 0.0 {
                ey[path] = m1[path] / prob[path];
                let second = m2[path] / prob[path];
                vy[path] = (second - ey[path] * ey[path]).max(0.0)
                    + joint.sigma_y * joint.sigma_y;
            }
        }
        ObservedLaw {
            occasions: j_count,
            prob,
            ey,
            vy,
        }
    }

    pub fn n_paths(&self) -> usize {
        self.prob.len()
    }

    /// Pointwise conditional expectation: `out[path] = E(target | bits of
    /// path selected by mask)`. Zero-probability groups yield zero.
    pub fn project(&self, target: &[f64], mask: usize) -> Vec<f64> {
        let n = self.n_paths();
        let mut num = vec![0.0; n];
        let mut den = vec![0.0; n];
        for path in 0..n {
            let key = path & mask;
            num[key] += self.prob[path] * target[path];
            den[key] += self.prob[path];
        }
        (0..n)
            .map(|path| {
                let key = path & mask;
                if den[key] > 0.0 {
                    num[key] / den[key]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Vector-valued projection, one conditional expectation per coordinate.
    pub fn project_vec(&self, target: &[Vec<f64>], mask: usize) -> Vec<Vec<f64>> {
        let n = self.n_paths();
        let dim = target.first().map_or(0, Vec::len);
        let mut num = vec![vec![0.0; dim]; n];
        let mut den = vec![0.0; n];
        for path in 0..n {
            let key = path & mask;
            for (acc, v) in num[key].iter_mut().zip(&target[path]) {
                *acc += self.prob[path] * v;
            }
            den[key] += self.prob[path];
        }
        (0..n)
            .map(|path| {
                let key = path & mask;
                if den[key] > 0.0 {
                    num[key].iter().map(|v| v / den[key]).collect()
                } else {
                    vec![0.0; dim]
                }
            })
            .collect()
    }

    /// Mean of a per-path field over the law.
    pub fn mean(&self, field: &[f64]) -> f64 {
        self.prob.iter().zip(field).map(|(p, v)| p * v).sum()
    }

    pub fn mean_vec(&self, field: &[Vec<f64>]) -> Vec<f64> {
        let dim = field.first().map_or(0, Vec::len);
        let mut out = vec![0.0; dim];
        for (p, v) in self.prob.iter().zip(field) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += p * x;
            }
        }
        out
    }
}

/// Result of one executable identity check.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IdentityReport {
    pub name: String,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl IdentityReport {
    pub fn new(name: impl Into<String>, lhs: Vec<f64>, rhs: Vec<f64>, tolerance: f64) -> Self {
        let max_abs_diff = lhs
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        IdentityReport {
            name: name.into(),
            lhs,
            rhs,
            max_abs_diff,
            tolerance,
            pass: max_abs_diff <= tolerance,
        }
    }
}

/// Enumeration context bundling the structural law, its observed margin and
/// the declared baseline columns.
pub struct Oracle {
    pub spec: DgpSpec,
    pub joint: JointLaw,
    pub law: ObservedLaw,
    /// Baseline covariate columns (a subset of the single covariate column
    /// at desk scale: empty or `[0]`).
    pub v_cols: Vec<usize>,
}

impl Oracle {
    pub fn new(spec: &DgpSpec, v_cols: &[usize]) -> Result<Oracle> {
        for &c in v_cols {
            if c != 0 {
                return Err(Error::Enumeration(format!(
                    "baseline column {c} out of range: the structural law has one covariate column"
                )));
            }
        }
        let joint = conditional_tables(spec)?;
        let law = ObservedLaw::from_joint(&joint);
        Ok(Oracle {
            spec: spec.clone(),
            joint,
            law,
            v_cols: v_cols.to_vec(),
        })
    }

    pub fn occasions(&self) -> usize {
        self.spec.occasions
    }

    /// Number of baseline strata (`2^|v_cols|`).
    pub fn n_strata(&self) -> usize {
        1usize << self.v_cols.len()
    }

    pub fn stratum_of_path(&self, path: usize) -> usize {
        if self.v_cols.is_empty() {
            0
        } else {
            usize::from(bit(path, l_bit(0)))
        }
    }

    /// Baseline vector for a stratum index.
    pub fn stratum_values(&self, s: usize) -> Vec<f64> {
        if self.v_cols.is_empty() {
            Vec::new()
        } else {
            vec![s as f64]
        }
    }

    pub fn stratum_prob(&self, s: usize) -> f64 {
        (0..self.law.n_paths())
            .filter(|&path| self.stratum_of_path(path) == s)
            .map(|path| self.law.prob[path])
            .sum()
    }

    /// Regime bits of a path.
    pub fn path_regime(&self, path: usize) -> Vec<u8> {
        (0..self.occasions()).map(|j| bit(path, a_bit(j))).collect()
    }

    /// MSM design row evaluated at a path's regime and stratum.
    pub fn path_design_row(&self, msm: &MsmSpec, path: usize) -> Vec<f64> {
        let regime = self.path_regime(path);
        let v = self.stratum_values(self.stratum_of_path(path));
        msm.design_row(&regime, &v)
    }

    /// `D_sm(h = grad g, beta)` conditional mean per path, and its
    /// coefficient on the realized terminal outcome.
    pub fn dsm_field(&self, msm: &MsmSpec, beta: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = self.law.n_paths();
        let mut value = Vec::with_capacity(n);
        let mut ycoef = Vec::with_capacity(n);
        for path in 0..n {
            let regime = self.path_regime(path);
            let v = self.stratum_values(self.stratum_of_path(path));
            match msm.family {
                crate::msm::ModelFamily::TerminalMean => {
                    let x = msm.design_row(&regime, &v);
                    let resid = self.law.ey[path] - msm.g(&regime, &v, beta);
                    value.push(x.iter().map(|xi| xi * resid).collect());
                    ycoef.push(x);
                }
                crate::msm::ModelFamily::RepeatedMeasures => {
                    // Y(m) = L(m) for m < J is part of the path; only the
                    // terminal coordinate carries outcome noise.
                    let j_count = self.occasions();
                    let p = msm.dim_beta();
                    let mut val = vec![0.0; p];
                    let mut yc = vec![0.0; p];
                    for m in 1..=j_count {
                        let xm = msm.design_row_at(&regime, &v, m);
                        let y_m = if m < j_count {
                            f64::from(bit(path, l_bit(m)))
                        } else {
                            self.law.ey[path]
                        };
                        let resid = y_m - msm.g_m(m, &regime, &v, beta);
                        for k in 0..p {
                            val[k] += xm[k] * resid;
                            if m == j_count {
                                yc[k] = xm[k];
                            }
                        }
                    }
                    value.push(val);
                    ycoef.push(yc);
                }
            }
        }
        (value, ycoef)
    }

    /// Derivative of the `D_sm` field in `beta`: per path, a `p x p` matrix
    /// flattened row-major (`d D_sm_r / d beta_c`). No outcome dependence.
    pub fn dsm_jacobian_field(&self, msm: &MsmSpec) -> Vec<Vec<f64>> {
        let n = self.law.n_paths();
        let p = msm.dim_beta();
        let mut out = Vec::with_capacity(n);
        for path in 0..n {
            let regime = self.path_regime(path);
            let v = self.stratum_values(self.stratum_of_path(path));
            let mut jac = vec![0.0; p * p];
            match msm.family {
                crate::msm::ModelFamily::TerminalMean => {
                    let x = msm.design_row(&regime, &v);
                    for r in 0..p {
                        for c in 0..p {
                            jac[r * p + c] = -x[r] * x[c];
                        }
                    }
                }
                crate::msm::ModelFamily::RepeatedMeasures => {
                    for m in 1..=self.occasions() {
                        let xm = msm.design_row_at(&regime, &v, m);
                        for r in 0..p {
                            for c in 0..p {
                                jac[r * p + c] -= xm[r] * xm[c];
                            }
                        }
                    }
                }
            }
            out.push(jac);
        }
        out
    }

    /// All distinct cells `path & mask` with positive probability.
    pub(crate) fn positive_cells(&self, mask: usize) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        for path in 0..self.law.n_paths() {
            if self.law.prob[path] > 0.0 {
                seen.insert(path & mask);
            }
        }
        seen.into_iter().collect()
    }

    /// Exact mean of the reciprocal signed weight `E[1/W(J-1)]` under the
    /// true (observable) nuisances: equals one by the weighted-moment
    /// identity with the constant test function.
    pub fn mean_inv_weight(&self, fstar: &FStarMode) -> Result<f64> {
        let nuis = PopNuisances::build(self, &MisspecPattern::all_correct(), fstar)?;
        let j_last = self.occasions() - 1;
        Ok(self.law.mean(&nuis.inv_w_prefix[j_last]))
    }

    /// Probability limit of an estimator: the root of its population
    /// estimating equation with nuisances fitted to the population law
    /// under the given misspecification pattern.
    pub fn plim_solve(
        &self,
        msm: &MsmSpec,
        estimator: EstimatorId,
        pattern: &MisspecPattern,
        fstar: &FStarMode,
    ) -> Result<Vec<f64>> {
        plim::plim_solve(self, msm, estimator, pattern, fstar)
    }

    /// Enumerated asymptotic variance (sandwich) of the IV-IPW estimator.
    pub fn avar_iv_ipw(&self, msm: &MsmSpec, fstar: &FStarMode, beta0: &[f64]) -> Result<Mat> {
        efficiency::avar_iv_ipw(self, msm, fstar, beta0)
    }

    /// Enumerated asymptotic variance of the influence-function class
    /// member `H(V) XiTilde` for a given index matrix per stratum.
    pub fn avar_h(
        &self,
        msm: &MsmSpec,
        fstar: &FStarMode,
        beta0: &[f64],
        h: &HByStratum,
    ) -> Result<Mat> {
        efficiency::avar_h(self, msm, fstar, beta0, h)
    }

    /// The population optimal index matrix per stratum.
    pub fn heff(&self, msm: &MsmSpec, fstar: &FStarMode, beta0: &[f64]) -> Result<HByStratum> {
        efficiency::heff(self, msm, fstar, beta0)
    }

    /// The index matrix equivalent to `h = grad g` (the default multiply
    /// robust estimator), for variance comparisons.
    pub fn h_grad_g(&self, msm: &MsmSpec) -> Result<HByStratum> {
        efficiency::h_grad_g(self, msm)
    }

    /// Deterministic random index matrices for the efficiency ordering test.
    pub fn random_h(&self, msm: &MsmSpec, count: usize, seed: u64) -> Result<Vec<HByStratum>> {
        efficiency::random_h(self, msm, count, seed)
    }
}
