//! Counterfactual means by the latent g-formula: sequentially integrate the
//! confounder and covariate processes with the treatment sequence held
//! fixed, then average the outcome mean. The instrument never enters
//! (exclusion holds by construction), so only `(U, L)` paths are walked.

use super::Oracle;
use crate::dgp::{DgpSpec, Var, VarKind};
use crate::linalg::Mat;
use crate::msm::{ModelFamily, MsmSpec};
use crate::nuisance::FStarMode;
use crate::panel::enumerate_regimes;
use crate::{Error, Result};

/// Depth-first sequential integration over `(U(j), L(j))` with `A` fixed to
/// the regime. `integrand(u_path, l_path, mu_y)` is evaluated at every full
/// latent path; the result is `E[integrand | L(0) = v]` (or the marginal
/// expectation when `v_restrict` is `None`).
pub(crate) fn latent_expectation(
    spec: &DgpSpec,
    regime: &[u8],
    v_restrict: Option<u8>,
    integrand: &dyn Fn(&[u8], &[u8], f64) -> f64,
) -> f64 {
    let j_count = spec.occasions;
    let mut u_path = vec![0u8; j_count];
    let mut l_path = vec![0u8; j_count];
    let mut numerator = 0.0;
    let mut denominator = 0.0;

    // Recursive walk: at depth j the paths up to j-1 are fixed.
    fn walk(
        spec: &DgpSpec,
        regime: &[u8],
        v_restrict: Option<u8>,
        j: usize,
        weight: f64,
        u_path: &mut Vec<u8>,
        l_path: &mut Vec<u8>,
        numerator: &mut f64,
        denominator: &mut f64,
        integrand: &dyn Fn(&[u8], &[u8], f64) -> f64,
    ) {
        let j_count = spec.occasions;
        if j == j_count {
            let assign = |v: Var| match v.kind {
                VarKind::U => u_path[v.time],
                VarKind::L => l_path[v.time],
                VarKind::A => regime[v.time],
                VarKind::Z => panic!("instrument in an outcome table"),
            };
            let mu = spec.mu_y.eval(&assign);
            *numerator += weight * integrand(u_path, l_path, mu);
            *denominator += weight;
            return;
        }
        for u in [0u8, 1] {
            u_path[j] = u;
            let pu = {
                let assign = |v: Var| match v.kind {
                    VarKind::U => u_path[v.time],
                    VarKind::L => l_path[v.time],
                    VarKind::A => regime[v.time],
                    VarKind::Z => panic!("instrument in a confounder table"),
                };
                spec.p_u[j].eval(&assign)
            };
            let wu = weight * if u == 1 { pu } else { 1.0 - pu };
            if wu == 0.0 {
                continue;
            }
            for l in [0u8, 1] {
                if j == 0 {
                    if let Some(v) = v_restrict {
                        if l != v {
                            continue;
                        }
                    }
                }
                l_path[j] = l;
                let pl = {
                    let assign = |v: Var| match v.kind {
                        VarKind::U => u_path[v.time],
                        VarKind::L => l_path[v.time],
                        VarKind::A => regime[v.time],
                        VarKind::Z => panic!("instrument in a covariate table"),
                    };
                    spec.p_l[j].eval(&assign)
                };
                let wl = wu * if l == 1 { pl } else { 1.0 - pl };
                if wl == 0.0 {
                    continue;
                }
                walk(
                    spec,
                    regime,
                    v_restrict,
                    j + 1,
                    wl,
                    u_path,
                    l_path,
                    numerator,
                    denominator,
                    integrand,
                );
            }
        }
    }

    walk(
        spec,
        regime,
        v_restrict,
        0,
        1.0,
        &mut u_path,
        &mut l_path,
        &mut numerator,
        &mut denominator,
        integrand,
    );
    if denominator > 0.0 {
        numerator / denominator
    } else {
        0.0
    }
}

/// Flat-enumeration counterfactual mean: a second, independent route to
/// `E(Y_a | V)` used to cross-check the sequential integration. Walks all
/// `(U, L)` bit-vectors as plain integers and sums probabilities directly.
pub fn brute_force_regime_mean(spec: &DgpSpec, regime: &[u8], v_restrict: Option<u8>) -> f64 {
    let j_count = spec.occasions;
    let mut num = 0.0;
    let mut den = 0.0;
    for bits in 0..(1usize << (2 * j_count)) {
        let u: Vec<u8> = (0..j_count).map(|j| ((bits >> j) & 1) as u8).collect();
        let l: Vec<u8> = (0..j_count)
            .map(|j| ((bits >> (j_count + j)) & 1) as u8)
            .collect();
        if let Some(v) = v_restrict {
            if l[0] != v {
                continue;
            }
        }
        let assign = |var: Var| match var.kind {
            VarKind::U => u[var.time],
            VarKind::L => l[var.time],
            VarKind::A => regime[var.time],
            VarKind::Z => unreachable!("no instrument dependence"),
        };
        let mut p = 1.0;
        for j in 0..j_count {
            let pu = spec.p_u[j].eval(&assign);
            p *= if u[j] == 1 { pu } else { 1.0 - pu };
            let pl = spec.p_l[j].eval(&assign);
            p *= if l[j] == 1 { pl } else { 1.0 - pl };
        }
        num += p * spec.mu_y.eval(&assign);
        den += p;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl Oracle {
    /// `E(Y_a | V = stratum)` by sequential integration; `None` gives the
    /// marginal counterfactual mean.
    pub fn counterfactual_mean(&self, regime: &[u8], stratum: Option<usize>) -> Result<f64> {
        if regime.len() != self.occasions() {
            return Err(Error::Enumeration(format!(
                "regime length {} != occasions {}",
                regime.len(),
                self.occasions()
            )));
        }
        let v = match stratum {
            Some(s) if !self.v_cols.is_empty() => Some(s as u8),
            _ => None,
        };
        Ok(latent_expectation(&self.spec, regime, v, &|_, _, mu| mu))
    }

    /// Counterfactual outcome series for the repeated-measures family:
    /// `E(Y_a(m) | V)` for `m = 1..=J`, where `Y(m) = L(m)` before the end
    /// of follow-up and `Y(J)` is the terminal outcome.
    pub fn counterfactual_series(&self, regime: &[u8], stratum: Option<usize>) -> Result<Vec<f64>> {
        let j_count = self.occasions();
        if regime.len() != j_count {
            return Err(Error::Enumeration("regime length mismatch".into()));
        }
        let v = match stratum {
            Some(s) if !self.v_cols.is_empty() => Some(s as u8),
            _ => None,
        };
        let mut out = Vec::with_capacity(j_count);
        for m in 1..=j_count {
            let mean = if m < j_count {
                latent_expectation(&self.spec, regime, v, &|_, l, _| f64::from(l[m]))
            } else {
                latent_expectation(&self.spec, regime, v, &|_, _, mu| mu)
            };
            out.push(mean);
        }
        Ok(out)
    }

    /// The target parameter: the root of the reference-density weighted
    /// population moment
    /// `sum_v P(v) sum_a prod_j f*(a(j)|v,a(j-1)) h(a,v) (E(Y_a|v) - g(a,v;beta)) = 0`
    /// with `h = grad g`, solved as a linear system.
    pub fn true_beta(&self, msm: &MsmSpec, fstar: &FStarMode) -> Result<Vec<f64>> {
        let p = msm.dim_beta();
        let j_count = self.occasions();
        let regimes = enumerate_regimes(j_count)?;
        let mut xtx = Mat::zeros(p, p);
        let mut xty = vec![0.0; p];

        for s in 0..self.n_strata() {
            let pv = if self.v_cols.is_empty() {
                1.0
            } else {
                self.stratum_prob(s)
            };
            if pv == 0.0 {
                continue;
            }
            let v = self.stratum_values(s);
            let stratum = if self.v_cols.is_empty() { None } else { Some(s) };
            for regime in &regimes {
                let bits = regime.bits();
                let mut w = pv;
                for j in 0..j_count {
                    w *= self.fstar_value(fstar, s, bits, j, bits[j])?;
                }
                match msm.family {
                    ModelFamily::TerminalMean => {
                        let x = msm.design_row(bits, &v);
                        let m = self.counterfactual_mean(bits, stratum)?;
                        for r in 0..p {
                            xty[r] += w * x[r] * m;
                            for c in 0..p {
                                xtx.add_at(r, c, w * x[r] * x[c]);
                            }
                        }
                    }
                    ModelFamily::RepeatedMeasures => {
                        let series = self.counterfactual_series(bits, stratum)?;
                        for (m_idx, target) in series.iter().enumerate() {
                            let x = msm.design_row_at(bits, &v, m_idx + 1);
                            for r in 0..p {
                                xty[r] += w * x[r] * target;
                                for c in 0..p {
                                    xtx.add_at(r, c, w * x[r] * x[c]);
                                }
                            }
                        }
                    }
                }
            }
        }
        xtx.solve_vec(&xty).map_err(|_| {
            Error::Numeric("MSM features are collinear under the reference density".into())
        })
    }

    /// `f*(A(j) = a | V = stratum s, A(j-1) = prefix)` for population
    /// computations.
    pub(crate) fn fstar_value(
        &self,
        fstar: &FStarMode,
        s: usize,
        a_prefix: &[u8],
        j: usize,
        a: u8,
    ) -> Result<f64> {
        let p1 = match fstar {
            FStarMode::Uniform => 0.5,
            FStarMode::Fitted => {
                // Population fit: E[A(j) | V, A(0..j-1)] from the observed law.
                let mut num = 0.0;
                let mut den = 0.0;
                for path in 0..self.law.n_paths() {
                    if self.law.prob[path] == 0.0 {
                        continue;
                    }
                    if !self.v_cols.is_empty() && self.stratum_of_path(path) != s {
                        continue;
                    }
                    let matches = (0..j).all(|k| super::bit(path, super::a_bit(k)) == a_prefix[k]);
                    if !matches {
                        continue;
                    }
                    den += self.law.prob[path];
                    if super::bit(path, super::a_bit(j)) == 1 {
                        num += self.law.prob[path];
                    }
                }
                if den == 0.0 {
                    return Err(Error::Positivity(format!(
                        "reference density undefined: empty cell at occasion {j}"
                    )));
                }
                num / den
            }
            FStarMode::Table { tables } => tables[j].eval(&|v: Var| match v.kind {
                VarKind::L => s as u8,
                VarKind::A => a_prefix[v.time],
                _ => panic!("reference table conditions on {v}"),
            }),
        };
        let out = if a == 1 { p1 } else { 1.0 - p1 };
        if out <= 0.0 {
            return Err(Error::Positivity(format!(
                "reference density gives zero mass at occasion {j}"
            )));
        }
        Ok(out)
    }
}
