//! Executable identity checks, each an exact population statement:
//!
//! * the instrument-contrast identity: the observable arm contrast of the
//!   treatment mean equals the structural additive instrument effect in
//!   every history cell;
//! * the weighted-moment identity: reweighting by the reciprocal signed
//!   weight turns observed moments into reference-density counterfactual
//!   moments, per baseline stratum;
//! * influence-function mean zero at the target parameter with all
//!   nuisances evaluated at their true enumerated values.

use super::popnuis::PopNuisances;
use super::{a_bit, bit, l_bit, z_bit, IdentityReport, Oracle};
use crate::dgp::{Var, VarKind};
use crate::msm::MsmSpec;
use crate::nuisance::{FStarMode, MisspecPattern};
use crate::Result;

/// A bounded test function `g(A, L)` for the weighted-moment identity:
/// an optional exact regime match, an optional exact covariate-path match,
/// optionally multiplied by the terminal outcome. (Affine in the outcome,
/// so conditional means integrate it exactly.)
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TestFn {
    pub name: String,
    pub regime: Option<Vec<u8>>,
    pub l_path: Option<Vec<u8>>,
    pub with_y: bool,
}

impl TestFn {
    pub fn constant() -> TestFn {
        TestFn {
            name: "const_1".into(),
            regime: None,
            l_path: None,
            with_y: false,
        }
    }

    pub fn outcome() -> TestFn {
        TestFn {
            name: "y".into(),
            regime: None,
            l_path: None,
            with_y: true,
        }
    }

    fn matches(&self, regime: &[u8], l_path: &[u8]) -> bool {
        if let Some(r) = &self.regime {
            if r != regime {
                return false;
            }
        }
        if let Some(l) = &self.l_path {
            if l != l_path {
                return false;
            }
        }
        true
    }
}

/// The standard battery: indicators of every `(regime, covariate path)`
/// cell plus their outcome-weighted versions, the constant and the plain
/// outcome. `2^(2J+1) + 2` functions.
pub fn weighted_moment_battery(occasions: usize) -> Vec<TestFn> {
    let mut out = vec![TestFn::constant(), TestFn::outcome()];
    for reg in 0..(1usize << occasions) {
        for lp in 0..(1usize << occasions) {
            let regime: Vec<u8> = (0..occasions).map(|j| ((reg >> j) & 1) as u8).collect();
            let l_path: Vec<u8> = (0..occasions).map(|j| ((lp >> j) & 1) as u8).collect();
            for with_y in [false, true] {
                out.push(TestFn {
                    name: format!(
                        "cell_a{}_l{}{}",
                        regime.iter().map(u8::to_string).collect::<String>(),
                        l_path.iter().map(u8::to_string).collect::<String>(),
                        if with_y { "_y" } else { "" }
                    ),
                    regime: Some(regime.clone()),
                    l_path: Some(l_path.clone()),
                    with_y,
                });
            }
        }
    }
    out
}

impl Oracle {
    /// Instrument-contrast identity: for every occasion `j`, every reachable
    /// history cell `(L(j), A(j-1), Z(j-1))` and every confounder value,
    /// the observable arm contrast equals the structural per-confounder
    /// contrast. With the compliance-type assumption in force the per-
    /// confounder contrasts coincide with the shift table and the check is
    /// the identification identity; under a raw-table violation the
    /// contrasts disagree and the check fails.
    pub fn check_instrument_contrast(&self) -> IdentityReport {
        let j_count = self.occasions();
        let mut lhs = Vec::new();
        let mut rhs = Vec::new();
        for j in 0..j_count {
            let design: usize = (0..=j).map(l_bit).fold(0, |m, b| m | (1 << b))
                | (0..j).map(z_bit).fold(0, |m, b| m | (1 << b))
                | (0..j).map(a_bit).fold(0, |m, b| m | (1 << b));
            let aj: Vec<f64> = (0..self.law.n_paths())
                .map(|p| f64::from(bit(p, a_bit(j))))
                .collect();
            let arm = self.law.project(&aj, design | (1 << z_bit(j)));
            let zmask = 1usize << z_bit(j);
            for cell in self.positive_cells(design) {
                let observable = arm[cell | zmask] - arm[cell & !zmask];
                // Structural contrast at each confounder assignment.
                for u_bits in 0..(1usize << (j + 1)) {
                    let assign = |v: Var| -> u8 {
                        match v.kind {
                            VarKind::U => ((u_bits >> v.time) & 1) as u8,
                            VarKind::L => bit(cell, l_bit(v.time)),
                            VarKind::Z => bit(cell, z_bit(v.time)),
                            VarKind::A => bit(cell, a_bit(v.time)),
                        }
                    };
                    let structural = {
                        let with_z = |z: u8| {
                            let assign_z = |v: Var| -> u8 {
                                if v.kind == VarKind::Z && v.time == j {
                                    z
                                } else {
                                    assign(v)
                                }
                            };
                            self.spec.a_prob(j, &assign_z)
                        };
                        with_z(1) - with_z(0)
                    };
                    lhs.push(observable);
                    rhs.push(structural);
                }
            }
        }
        IdentityReport::new("instrument_contrast_identity", lhs, rhs, 1e-10)
    }

    /// Weighted-moment identity for one test function: per baseline
    /// stratum, `E[g(A,L)/W | V]` from the observed law and weights equals
    /// `sum_a E[g(a, L_a) | V] prod_j f*(a(j)|V,a(j-1))` from the latent
    /// g-formula.
    pub fn check_weighted_moment(&self, g: &TestFn, fstar: &FStarMode) -> Result<IdentityReport> {
        let nuis = PopNuisances::build(self, &MisspecPattern::all_correct(), fstar)?;
        let j_count = self.occasions();
        let j_last = j_count - 1;
        let regimes = crate::panel::enumerate_regimes(j_count)?;

        let mut lhs = Vec::with_capacity(self.n_strata());
        let mut rhs = Vec::with_capacity(self.n_strata());
        for s in 0..self.n_strata() {
            // Left: observed-law average of g / W within the stratum.
            let mut num = 0.0;
            let mut den = 0.0;
            for p in 0..self.law.n_paths() {
                if self.stratum_of_path(p) != s {
                    continue;
                }
                den += self.law.prob[p];
                let regime = self.path_regime(p);
                let l_path: Vec<u8> = (0..j_count).map(|t| bit(p, l_bit(t))).collect();
                if !g.matches(&regime, &l_path) {
                    continue;
                }
                let gval = if g.with_y { self.law.ey[p] } else { 1.0 };
                num += self.law.prob[p] * gval * nuis.inv_w_prefix[j_last][p];
            }
            let left = if den > 0.0 { num / den } else { 0.0 };

            // Right: reference-density weighted counterfactual moments.
            let v = if self.v_cols.is_empty() {
                None
            } else {
                Some(s as u8)
            };
            let mut right = 0.0;
            for reg in &regimes {
                let bits = reg.bits();
                let mut w = 1.0;
                for j in 0..j_count {
                    w *= self.fstar_value(fstar, s, bits, j, bits[j])?;
                }
                let mean = super::counterfactual::latent_expectation(
                    &self.spec,
                    bits,
                    v,
                    &|_, l, mu| {
                        if g.matches(bits, l) {
                            if g.with_y {
                                mu
                            } else {
                                1.0
                            }
                        } else {
                            0.0
                        }
                    },
                );
                right += w * mean;
            }
            lhs.push(left);
            rhs.push(right);
        }
        Ok(IdentityReport::new(
            format!("weighted_moment[{}]", g.name),
            lhs,
            rhs,
            1e-10,
        ))
    }

    /// Influence-function mean zero: `E[D(h, beta)] = 0` at the target
    /// parameter with every nuisance at its true enumerated value.
    pub fn check_influence_zero(
        &self,
        msm: &MsmSpec,
        fstar: &FStarMode,
        beta: &[f64],
    ) -> Result<IdentityReport> {
        let nuis = PopNuisances::build(self, &MisspecPattern::all_correct(), fstar)?;
        let (dsm, _) = self.dsm_field(msm, beta);
        let field = self.dagger_field(&nuis, &dsm, None);
        let lhs = self.law.mean_vec(&field.value);
        let rhs = vec![0.0; lhs.len()];
        Ok(IdentityReport::new("influence_mean_zero", lhs, rhs, 1e-10))
    }
}
