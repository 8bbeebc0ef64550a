//! Population-level nuisance functions on the observed-path grid.
//!
//! Every fitted quantity is represented pointwise: a vector over observed
//! paths whose value depends only on the model's conditioning prefix.
//! "Fitting under misspecification" is exact: the omitted covariate column
//! is marginalized out by projecting onto the reduced conditioning set.
//! Both the true (full-design) and starred (pattern-dependent) versions are
//! kept so the mixed Psi chains of the robustness conditions can pick
//! either side per level.

use super::{a_bit, bit, l_bit, z_bit, ObservedLaw, Oracle};
use crate::dgp::{Var, VarKind};
use crate::nuisance::{FStarMode, Flag, MisspecPattern};
use crate::{Error, Result};

/// Conditioning masks for one occasion's models.
fn mask_l(upto: usize, omit: bool) -> usize {
    if omit {
        0
    } else {
        (0..=upto).map(l_bit).fold(0, |m, b| m | (1 << b))
    }
}

fn mask_z(upto_exclusive: usize) -> usize {
    (0..upto_exclusive).map(z_bit).fold(0, |m, b| m | (1 << b))
}

fn mask_a(upto_exclusive: usize) -> usize {
    (0..upto_exclusive).map(a_bit).fold(0, |m, b| m | (1 << b))
}

#[derive(Debug, Clone)]
pub struct PopNuisances {
    pub occasions: usize,
    /// `P(Z(j)=1 | .)` on the full design and on the pattern design.
    pub fz1_true: Vec<Vec<f64>>,
    pub fz1_star: Vec<Vec<f64>>,
    /// Instrument-arm contrast of the treatment mean.
    pub delta_true: Vec<Vec<f64>>,
    pub delta_star: Vec<Vec<f64>>,
    /// `E(A(j)=1 | A(j-1), L(j), Z(j))`.
    pub ma_true: Vec<Vec<f64>>,
    pub ma_star: Vec<Vec<f64>>,
    /// Arm-zero mean on the treatment-mean design.
    pub m0_star: Vec<Vec<f64>>,
    /// `P(A(j)=1 | L(j), A(j-1))` (no instrument), for SRA weights.
    pub fa1_star: Vec<Vec<f64>>,
    /// `f*(A(j)=1 | V, A(j-1))`.
    pub fstar1: Vec<Vec<f64>>,
    /// Reciprocal signed weight prefix `1/W(j)` under the starred law.
    pub inv_w_prefix: Vec<Vec<f64>>,
    /// Starred per-occasion factor `W1(j)` at the observed instrument.
    pub w1_star: Vec<Vec<f64>>,
    /// Reciprocal SRA weight prefix `1/W(j)` under the starred law.
    pub inv_sra_prefix: Vec<Vec<f64>>,
    pub pattern: MisspecPattern,
    psi_mask_true: Vec<usize>,
    psi_mask_star: Vec<usize>,
    cj_mask_star: Vec<usize>,
}

fn at_observed(p1: f64, path: usize, b: usize) -> f64 {
    if bit(path, b) == 1 {
        p1
    } else {
        1.0 - p1
    }
}

impl PopNuisances {
    pub fn build(oracle: &Oracle, pattern: &MisspecPattern, fstar: &FStarMode) -> Result<PopNuisances> {
        let law = &oracle.law;
        let j_count = oracle.occasions();
        let n = law.n_paths();
        let omit = |flag: Flag| flag.is_omit();

        let mut fz1_true = Vec::with_capacity(j_count);
        let mut fz1_star = Vec::with_capacity(j_count);
        let mut delta_true = Vec::with_capacity(j_count);
        let mut delta_star = Vec::with_capacity(j_count);
        let mut ma_true = Vec::with_capacity(j_count);
        let mut ma_star = Vec::with_capacity(j_count);
        let mut m0_star_all = Vec::with_capacity(j_count);
        let mut fa1_star = Vec::with_capacity(j_count);
        let mut fstar1 = Vec::with_capacity(j_count);

        for j in 0..j_count {
            let zj: Vec<f64> = (0..n).map(|p| f64::from(bit(p, z_bit(j)))).collect();
            let aj: Vec<f64> = (0..n).map(|p| f64::from(bit(p, a_bit(j)))).collect();

            let fz_design_full = mask_l(j, false) | mask_z(j) | mask_a(j);
            let fz_design_star =
                mask_l(j, omit(pattern.instrument_density)) | mask_z(j) | mask_a(j);
            fz1_true.push(law.project(&zj, fz_design_full));
            fz1_star.push(law.project(&zj, fz_design_star));

            let contrast = |design: usize| -> Vec<f64> {
                let m = law.project(&aj, design | (1 << z_bit(j)));
                (0..n)
                    .map(|p| m[p | (1 << z_bit(j))] - m[p & !(1 << z_bit(j))])
                    .collect()
            };
            delta_true.push(contrast(fz_design_full));
            delta_star.push(contrast(
                mask_l(j, omit(pattern.delta)) | mask_z(j) | mask_a(j),
            ));

            // The treatment mean decomposes as m0 + Z(j) * delta, sharing
            // the (possibly starred) weight contrast; m0 follows its own
            // flag. The true version coincides with the direct projection.
            let zmask_j = 1usize << z_bit(j);
            let arm0_of = |design: usize| -> Vec<f64> {
                let m = law.project(&aj, design | zmask_j);
                (0..n).map(|p| m[p & !zmask_j]).collect()
            };
            let m0_true = arm0_of(mask_l(j, false) | mask_z(j) | mask_a(j));
            let m0_star = arm0_of(mask_l(j, omit(pattern.treatment_mean)) | mask_z(j) | mask_a(j));
            ma_true.push(
                (0..n)
                    .map(|p| m0_true[p] + f64::from(bit(p, z_bit(j))) * delta_true[j][p])
                    .collect(),
            );
            ma_star.push(
                (0..n)
                    .map(|p| m0_star[p] + f64::from(bit(p, z_bit(j))) * delta_star[j][p])
                    .collect(),
            );
            m0_star_all.push(m0_star);

            let fa_design_star = mask_l(j, omit(pattern.sra_treatment)) | mask_a(j);
            fa1_star.push(law.project(&aj, fa_design_star));

            // Reference density per path.
            let fs = match fstar {
                FStarMode::Uniform => vec![0.5; n],
                FStarMode::Fitted => {
                    // Population fit of E[A(j) | V, A(j-1)]; a marginalized
                    // reference drops the baseline stratum.
                    let vmask = if oracle.v_cols.is_empty() || pattern.reference_density.is_omit()
                    {
                        0
                    } else {
                        1usize << l_bit(0)
                    };
                    law.project(&aj, vmask | mask_a(j))
                }
                FStarMode::Table { tables } => (0..n)
                    .map(|p| {
                        tables[j].eval(&|v: Var| match v.kind {
                            VarKind::L => bit(p, l_bit(0)),
                            VarKind::A => bit(p, a_bit(v.time)),
                            _ => panic!("reference table conditions on {v}"),
                        })
                    })
                    .collect(),
            };
            fstar1.push(fs);
        }

        // Guard the signed-weight denominators.
        for j in 0..j_count {
            for p in 0..n {
                if law.prob[p] == 0.0 {
                    continue;
                }
                if delta_star[j][p].abs() < 1e-9 || delta_true[j][p].abs() < 1e-9 {
                    return Err(Error::Relevance(format!(
                        "instrument effect vanishes in a reachable cell at occasion {j}"
                    )));
                }
                if !(fstar1[j][p] > 0.0 && fstar1[j][p] < 1.0) {
                    return Err(Error::Positivity(format!(
                        "reference density {} not strictly inside (0,1)",
                        fstar1[j][p]
                    )));
                }
            }
        }

        let mut inv_w_prefix = vec![vec![0.0; n]; j_count];
        let mut w1_star = vec![vec![0.0; n]; j_count];
        let mut inv_sra_prefix = vec![vec![0.0; n]; j_count];
        for p in 0..n {
            let mut inv = 1.0;
            let mut inv_sra = 1.0;
            for j in 0..j_count {
                let sign_z = if bit(p, z_bit(j)) == 1 { 1.0 } else { -1.0 };
                let sign_a = if bit(p, a_bit(j)) == 1 { 1.0 } else { -1.0 };
                let fz = at_observed(fz1_star[j][p], p, z_bit(j));
                let fs = at_observed(fstar1[j][p], p, a_bit(j));
                let d = delta_star[j][p];
                w1_star[j][p] = sign_z * fz * d;
                inv *= sign_z * sign_a * fs / (fz * d);
                inv_w_prefix[j][p] = inv;

                let fa = at_observed(fa1_star[j][p], p, a_bit(j));
                if law.prob[p] > 0.0 && fa <= 0.0 {
                    return Err(Error::Positivity(format!(
                        "treatment density zero on a reachable path at occasion {j}"
                    )));
                }
                inv_sra *= if fa > 0.0 { fs / fa } else { 0.0 };
                inv_sra_prefix[j][p] = inv_sra;
            }
        }

        let psi_mask_true: Vec<usize> = (0..j_count)
            .map(|j| mask_l(j, false) | mask_z(j + 1) | mask_a(j))
            .collect();
        let psi_omit = pattern.psi1.is_omit() || pattern.psi0.is_omit();
        let psi_mask_star: Vec<usize> = (0..j_count)
            .map(|j| mask_l(j, psi_omit) | mask_z(j + 1) | mask_a(j))
            .collect();
        let cj_mask_star: Vec<usize> = (0..j_count)
            .map(|j| mask_l(j, omit(pattern.cj)) | mask_a(j + 1))
            .collect();

        Ok(PopNuisances {
            occasions: j_count,
            fz1_true,
            fz1_star,
            delta_true,
            delta_star,
            ma_true,
            ma_star,
            m0_star: m0_star_all,
            fa1_star,
            fstar1,
            inv_w_prefix,
            w1_star,
            inv_sra_prefix,
            pattern: pattern.clone(),
            psi_mask_true,
            psi_mask_star,
            cj_mask_star,
        })
    }

    #[inline]
    pub fn inv_w_before(&self, j: usize, path: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.inv_w_prefix[j - 1][path]
        }
    }

    #[inline]
    pub fn inv_sra_before(&self, j: usize, path: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.inv_sra_prefix[j - 1][path]
        }
    }

    /// `f*(A(j) = a | path prefix)`.
    #[inline]
    pub fn fstar_at(&self, j: usize, path: usize, a: u8) -> f64 {
        if a == 1 {
            self.fstar1[j][path]
        } else {
            1.0 - self.fstar1[j][path]
        }
    }
}

/// Per-level contrast and arm-zero values of one Psi chain.
#[derive(Debug, Clone)]
pub struct PopPsi {
    /// `gamma1[j][path]`: the instrument-arm contrast of `Psi_j`.
    pub gamma1: Vec<Vec<Vec<f64>>>,
    /// `gamma0[j][path]`: `Psi_j` at `Z(j) = 0`.
    pub gamma0: Vec<Vec<Vec<f64>>>,
}

fn run_chain(
    law: &ObservedLaw,
    nuis: &PopNuisances,
    source: &[Vec<f64>],
    delta: &[Vec<f64>],
    masks: &[usize],
    // When mixing chains, the upstream contrast fed into level j comes from
    // this override (the "chosen" gamma1 of level j+1).
    upstream_override: Option<&PopPsi>,
    use_true_gamma1: impl Fn(usize) -> bool,
) -> PopPsi {
    let j_count = nuis.occasions;
    let n = law.n_paths();
    let dim = source.first().map_or(0, Vec::len);
    let mut gamma1 = vec![Vec::new(); j_count];
    let mut gamma0 = vec![Vec::new(); j_count];

    let mut upstream: Vec<Vec<f64>> = source.to_vec();
    for j in (0..j_count).rev() {
        let mut pseudo = vec![vec![0.0; dim]; n];
        for p in 0..n {
            let sign_a = if bit(p, a_bit(j)) == 1 { 1.0 } else { -1.0 };
            let fs = nuis.fstar_at(j, p, bit(p, a_bit(j)));
            let d = delta[j][p];
            let scale = if d != 0.0 { sign_a * fs / d } else { 0.0 };
            for (out, v) in pseudo[p].iter_mut().zip(&upstream[p]) {
                *out = scale * v;
            }
        }
        let psi = law.project_vec(&pseudo, masks[j]);
        let zmask = 1usize << z_bit(j);
        let g1: Vec<Vec<f64>> = (0..n)
            .map(|p| {
                psi[p | zmask]
                    .iter()
                    .zip(&psi[p & !zmask])
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect();
        let g0: Vec<Vec<f64>> = (0..n).map(|p| psi[p & !zmask].clone()).collect();
        gamma1[j] = g1;
        gamma0[j] = g0;

        if j > 0 {
            upstream = if use_true_gamma1(j) {
                upstream_override
                    .map(|tc| tc.gamma1[j].clone())
                    .unwrap_or_else(|| gamma1[j].clone())
            } else {
                gamma1[j].clone()
            };
        }
    }
    PopPsi { gamma1, gamma0 }
}

impl Oracle {
    /// The true Psi chain: full designs, true instrument-effect.
    pub fn psi_chain_true(&self, nuis: &PopNuisances, source: &[Vec<f64>]) -> PopPsi {
        run_chain(
            &self.law,
            nuis,
            source,
            &nuis.delta_true,
            &nuis.psi_mask_true,
            None,
            |_| false,
        )
    }

    /// The chain the analyst would converge to under the pattern, with
    /// per-level sides chosen by the psi1/psi0 flags: levels whose flag is
    /// `Correct` take the true values, others the starred recursion.
    pub fn psi_chain_mixed(&self, nuis: &PopNuisances, source: &[Vec<f64>]) -> PopPsi {
        let truth = self.psi_chain_true(nuis, source);
        let psi1_true = !nuis.pattern.psi1.is_omit();
        let psi0_true = !nuis.pattern.psi0.is_omit();
        if psi1_true && psi0_true {
            return truth;
        }
        let starred = run_chain(
            &self.law,
            nuis,
            source,
            &nuis.delta_star,
            &nuis.psi_mask_star,
            Some(&truth),
            |_| psi1_true,
        );
        PopPsi {
            gamma1: if psi1_true { truth.gamma1 } else { starred.gamma1 },
            gamma0: if psi0_true { truth.gamma0 } else { starred.gamma0 },
        }
    }
}

/// A population influence-function field: the value at the conditional
/// outcome mean and the coefficient of the realized terminal outcome.
/// Second moments need both (`E[UU'] = E[val val'] + E[vy yc yc']`).
#[derive(Debug, Clone)]
pub struct DaggerField {
    pub value: Vec<Vec<f64>>,
    pub ycoef: Vec<Vec<f64>>,
}

impl Oracle {
    /// Assemble the multiply robust influence field
    /// `D = src/W - sum_j (1/W(j-1)) { s_z Psi_j / f(Z(j)|.) - Gamma1_j }
    ///   - sum_j eps_j Gamma1_j / (W(j-1) W1(j))`
    /// with all starred quantities taken from the pattern. The epsilon sum
    /// enters with its own minus sign (the grouping under which the
    /// unbiasedness telescoping goes through).
    pub fn dagger_field(
        &self,
        nuis: &PopNuisances,
        src_value: &[Vec<f64>],
        src_ycoef: Option<&[Vec<f64>]>,
    ) -> DaggerField {
        let law = &self.law;
        let n = law.n_paths();
        let j_count = nuis.occasions;
        let dim = src_value.first().map_or(0, Vec::len);
        let psi = self.psi_chain_mixed(nuis, src_value);
        let j_last = j_count - 1;

        let mut value = vec![vec![0.0; dim]; n];
        let mut ycoef = vec![vec![0.0; dim]; n];
        for p in 0..n {
            let inv_w = nuis.inv_w_prefix[j_last][p];
            for d in 0..dim {
                value[p][d] = src_value[p][d] * inv_w;
            }
            if let Some(yc) = src_ycoef {
                for d in 0..dim {
                    ycoef[p][d] = yc[p][d] * inv_w;
                }
            }
            for j in 0..j_count {
                let prefix = nuis.inv_w_before(j, p);
                let zj = bit(p, z_bit(j));
                let sign_z = if zj == 1 { 1.0 } else { -1.0 };
                let fz = at_observed(nuis.fz1_star[j][p], p, z_bit(j));
                let eps = f64::from(bit(p, a_bit(j))) - nuis.ma_star[j][p];
                let w1 = nuis.w1_star[j][p];
                for d in 0..dim {
                    let g1 = psi.gamma1[j][p][d];
                    let g0 = psi.gamma0[j][p][d];
                    let psi_obs = g0 + f64::from(zj) * g1;
                    let brace = sign_z * psi_obs / fz - g1 + eps * g1 / w1;
                    value[p][d] -= prefix * brace;
                }
            }
        }
        DaggerField { value, ycoef }
    }

    /// The treatment-process augmentation for the doubly robust estimator
    /// under sequential randomization, per path:
    /// `D_tp = sum_j [ -R_j / W(j) + sum_a f*(a|V,A(j-1)) R_j(a) / W(j-1) ]`
    /// where `R_j` is the backward reference-density regression of `D_sm`.
    pub fn dtp_field(&self, nuis: &PopNuisances, dsm_value: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let law = &self.law;
        let n = law.n_paths();
        let j_count = nuis.occasions;
        let dim = dsm_value.first().map_or(0, Vec::len);

        // Backward recursion for R_j on the starred design.
        let mut r: Vec<Vec<Vec<f64>>> = vec![Vec::new(); j_count];
        let mut target: Vec<Vec<f64>> = dsm_value.to_vec();
        for j in (0..j_count).rev() {
            r[j] = law.project_vec(&target, nuis.cj_mask_star[j]);
            if j > 0 {
                let amask = 1usize << a_bit(j);
                target = (0..n)
                    .map(|p| {
                        let mut acc = vec![0.0; dim];
                        for a in [0u8, 1] {
                            let fs = nuis.fstar_at(j, p, a);
                            let flipped = if a == 1 { p | amask } else { p & !amask };
                            for (o, v) in acc.iter_mut().zip(&r[j][flipped]) {
                                *o += fs * v;
                            }
                        }
                        acc
                    })
                    .collect();
            }
        }

        (0..n)
            .map(|p| {
                let mut out = vec![0.0; dim];
                for j in 0..j_count {
                    let inv_j = nuis.inv_sra_prefix[j][p];
                    let inv_prev = nuis.inv_sra_before(j, p);
                    let amask = 1usize << a_bit(j);
                    for d in 0..dim {
                        let mut avg = 0.0;
                        for a in [0u8, 1] {
                            let fs = nuis.fstar_at(j, p, a);
                            let flipped = if a == 1 { p | amask } else { p & !amask };
                            avg += fs * r[j][flipped][d];
                        }
                        out[d] += -r[j][p][d] * inv_j + avg * inv_prev;
                    }
                }
                out
            })
            .collect()
    }
}
