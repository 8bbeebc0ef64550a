//! Bridge from population nuisances to the sample estimators: saturated
//! conditional models whose cells carry the exact enumerated values. Used
//! to run estimators with known (true or deliberately marginalized)
//! nuisances, e.g. for variance comparisons against enumerated asymptotic
//! variances, which also treat nuisances as known.

use super::popnuis::PopNuisances;
use super::{a_bit, bit, l_bit, z_bit, Oracle};
use crate::nuisance::{
    CondModel, DesignSpec, FStarMode, MisspecPattern, ModelForm, NuisanceConfig, NuisanceSet,
    RefDensity, TreatmentArms,
};
use crate::Result;
use std::collections::BTreeMap;

impl Oracle {
    /// Packed design key of an observed path, matching the panel-side
    /// `DesignSpec::pack` bit order.
    fn design_key(&self, design: &DesignSpec, path: usize) -> u64 {
        let mut key = 0u64;
        let mut pos = 0usize;
        for &(t, _c) in &design.l_terms {
            key |= u64::from(bit(path, l_bit(t))) << pos;
            pos += 1;
        }
        for &t in &design.z_times {
            key |= u64::from(bit(path, z_bit(t))) << pos;
            pos += 1;
        }
        for &t in &design.a_times {
            key |= u64::from(bit(path, a_bit(t))) << pos;
            pos += 1;
        }
        key
    }

    /// Saturated model whose cells are a per-path population field.
    fn model_from_field(
        &self,
        time: usize,
        design: DesignSpec,
        field: &[f64],
        prob_clamp: Option<f64>,
    ) -> CondModel {
        let mut cells: BTreeMap<u64, f64> = BTreeMap::new();
        let mut mass_weighted = 0.0;
        let mut mass = 0.0;
        for path in 0..self.law.n_paths() {
            let key = self.design_key(&design, path);
            cells.insert(key, field[path]);
            mass_weighted += self.law.prob[path] * field[path];
            mass += self.law.prob[path];
        }
        let fallback = if mass > 0.0 { mass_weighted / mass } else { 0.5 };
        CondModel {
            time,
            design,
            form: ModelForm::Saturated { cells, fallback },
            prob_clamp,
        }
    }

    /// A `NuisanceSet` holding the exact population values under the
    /// pattern (true conditionals with omitted columns marginalized out),
    /// usable with any sample estimator.
    pub fn population_nuisances(
        &self,
        pattern: &MisspecPattern,
        fstar: &FStarMode,
        cfg: &NuisanceConfig,
    ) -> Result<NuisanceSet> {
        let nuis = PopNuisances::build(self, pattern, fstar)?;
        let j_count = self.occasions();
        let n = self.law.n_paths();
        let omit = |flag: crate::nuisance::Flag| if flag.is_omit() { Some(0) } else { None };

        let mut f_z = Vec::with_capacity(j_count);
        let mut treat_w = Vec::with_capacity(j_count);
        let mut m_a0 = Vec::with_capacity(j_count);
        let mut f_a_sra = Vec::with_capacity(j_count);
        for j in 0..j_count {
            f_z.push(self.model_from_field(
                j,
                DesignSpec::instrument(j, 1, omit(pattern.instrument_density)),
                &nuis.fz1_star[j],
                Some(cfg.prob_clamp),
            ));

            // Weight-side arms on the delta-flag design.
            let delta_design = DesignSpec::treatment(j, 1, omit(pattern.delta));
            let zj: Vec<f64> = (0..n).map(|p| f64::from(bit(p, z_bit(j)))).collect();
            let _ = zj;
            let aj: Vec<f64> = (0..n).map(|p| f64::from(bit(p, a_bit(j)))).collect();
            let design_mask = {
                let mut m = 0usize;
                for &(t, _) in &delta_design.l_terms {
                    m |= 1 << l_bit(t);
                }
                for &t in &delta_design.z_times {
                    m |= 1 << z_bit(t);
                }
                for &t in &delta_design.a_times {
                    m |= 1 << a_bit(t);
                }
                m
            };
            let arm = self.law.project(&aj, design_mask | (1 << z_bit(j)));
            let zmask = 1usize << z_bit(j);
            let m0_field: Vec<f64> = (0..n).map(|p| arm[p & !zmask]).collect();
            let m1_field: Vec<f64> = (0..n).map(|p| arm[p | zmask]).collect();
            treat_w.push(TreatmentArms {
                m0: self.model_from_field(j, delta_design.clone(), &m0_field, None),
                m1: self.model_from_field(j, delta_design, &m1_field, None),
                delta_floor: cfg.delta_floor,
            });

            m_a0.push(self.model_from_field(
                j,
                DesignSpec::treatment(j, 1, omit(pattern.treatment_mean)),
                &nuis.m0_star[j],
                None,
            ));

            f_a_sra.push(self.model_from_field(
                j,
                DesignSpec::sra_treatment(j, 1, omit(pattern.sra_treatment)),
                &nuis.fa1_star[j],
                Some(cfg.prob_clamp),
            ));
        }

        let f_star = match fstar {
            FStarMode::Uniform => RefDensity::Uniform,
            FStarMode::Table { tables } => RefDensity::Table(tables.clone()),
            FStarMode::Fitted => {
                let mut models = Vec::with_capacity(j_count);
                for k in 0..j_count {
                    let design = DesignSpec::reference(
                        k,
                        if self.v_cols.is_empty() { &[] } else { &[0] },
                    );
                    models.push(self.model_from_field(
                        k,
                        design,
                        &nuis.fstar1[k],
                        Some(cfg.prob_clamp),
                    ));
                }
                RefDensity::Fitted(models)
            }
        };

        let psi_omit = if pattern.psi1.is_omit() || pattern.psi0.is_omit() {
            Some(0)
        } else {
            None
        };
        Ok(NuisanceSet {
            occasions: j_count,
            f_z,
            treat_w,
            m_a0,
            f_a_sra,
            f_star,
            pattern: pattern.clone(),
            config: *cfg,
            psi_omit,
            cj_omit: omit(pattern.cj),
            warnings: Vec::new(),
        })
    }
}
