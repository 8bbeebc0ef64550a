//! Cumulative weights per subject and occasion.
//!
//! Under sequential randomization the weight at occasion `j` is
//! `W(j) = prod_{k<=j} f(A(k)|L(k),A(k-1)) / f*(A(k)|V,A(k-1))`.
//!
//! The signed instrument weights multiply two factors per occasion,
//!
//! `W1(k) = (-1)^(1-Z(k)) f(Z(k)|L(k),A(k-1),Z(k-1)) delta_k`
//! `W2(k) = (-1)^(1-A(k)) / f*(A(k)|V,A(k-1))`
//!
//! with products running from `k = 0` (a `k = 1` start breaks the
//! weighted-moment identity on processes with a time-0 effect). Magnitudes
//! accumulate in log space with the sign carried separately, so both weight
//! families share one accumulation path and long horizons cannot overflow.

use crate::nuisance::{CondModel, NuisanceSet, RefDensity, TreatmentArms};
use crate::panel::Panel;
use crate::{Error, Result};

/// Per-subject, per-occasion weight tracks. Entries are indexed
/// `[subject * J + j]`; `sra` or the `iv*` family may be empty when only
/// the other was computed.
#[derive(Debug, Clone, Default)]
pub struct WeightTrack {
    pub n: usize,
    pub occasions: usize,
    /// Cumulative sequential-randomization weight `W(j)` (positive).
    pub sra: Vec<f64>,
    /// Cumulative signed instrument weight.
    pub iv: Vec<f64>,
    /// Per-occasion factor `W1(j)`.
    pub iv1: Vec<f64>,
    /// Per-occasion factor `W2(j)`.
    pub iv2: Vec<f64>,
    /// `1 / W(j)` accumulated directly as a product of reciprocal factors.
    pub inv_iv: Vec<f64>,
    /// Count of probability predictions that hit the clamp.
    pub clamp_events: usize,
    /// Count of instrument-effect predictions that hit the floor.
    pub floor_events: usize,
    /// Largest relative gap between `inv_iv` and `1/iv` (reconciliation).
    pub max_reconcile_gap: f64,
}

impl WeightTrack {
    #[inline]
    pub fn sra_at(&self, i: usize, j: usize) -> f64 {
        self.sra[i * self.occasions + j]
    }

    #[inline]
    pub fn iv_at(&self, i: usize, j: usize) -> f64 {
        self.iv[i * self.occasions + j]
    }

    #[inline]
    pub fn iv1_at(&self, i: usize, j: usize) -> f64 {
        self.iv1[i * self.occasions + j]
    }

    #[inline]
    pub fn inv_iv_at(&self, i: usize, j: usize) -> f64 {
        self.inv_iv[i * self.occasions + j]
    }

    /// `1 / W(j-1)` with the `W(-1) = 1` convention.
    #[inline]
    pub fn inv_iv_before(&self, i: usize, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.inv_iv_at(i, j - 1)
        }
    }

    /// Reciprocal through the log-space cumulative product. The estimators
    /// use this route for both weight families so the perfect-compliance
    /// collapse is bit-exact.
    #[inline]
    pub fn recip_iv_at(&self, i: usize, j: usize) -> f64 {
        1.0 / self.iv_at(i, j)
    }

    #[inline]
    pub fn recip_iv_before(&self, i: usize, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.recip_iv_at(i, j - 1)
        }
    }

    /// `1 / W(j)` under sequential randomization.
    #[inline]
    pub fn inv_sra_at(&self, i: usize, j: usize) -> f64 {
        1.0 / self.sra_at(i, j)
    }

    /// `1 / W(j-1)` under sequential randomization, `W(-1) = 1`.
    pub fn inv_sra_before(&self, i: usize, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.inv_sra_at(i, j - 1)
        }
    }
}

fn clamped(p: f64, clamp: f64, events: &mut usize) -> f64 {
    if p < clamp {
        *events += 1;
        clamp
    } else if p > 1.0 - clamp {
        *events += 1;
        1.0 - clamp
    } else {
        p
    }
}

/// Sequential-randomization weights `W(j)` from a fitted treatment density.
pub fn sra_weights(
    panel: &Panel,
    f_a: &[CondModel],
    f_star: &RefDensity,
    clamp: f64,
) -> Result<WeightTrack> {
    let n = panel.n();
    let j_count = panel.occasions();
    let mut track = WeightTrack {
        n,
        occasions: j_count,
        sra: vec![0.0; n * j_count],
        ..WeightTrack::default()
    };
    for i in 0..n {
        let mut log_sum = 0.0;
        for j in 0..j_count {
            let a = panel.a(i, j);
            let p1 = clamped(f_a[j].predict(panel, i, &[]), clamp, &mut track.clamp_events);
            let fa = if a == 1 { p1 } else { 1.0 - p1 };
            let fs = f_star.prob(panel, i, j, a, &[]);
            if fs <= 0.0 {
                return Err(Error::Positivity(format!(
                    "reference density zero at subject {}, occasion {j}",
                    panel.id(i)
                )));
            }
            log_sum += fa.ln() - fs.ln();
            track.sra[i * j_count + j] = log_sum.exp();
        }
    }
    Ok(track)
}

/// Signed instrument weights (cumulative, per-occasion factors, and the
/// directly accumulated reciprocal).
pub fn iv_weights(
    panel: &Panel,
    f_z: &[CondModel],
    delta: &[TreatmentArms],
    f_star: &RefDensity,
    clamp: f64,
) -> Result<WeightTrack> {
    let n = panel.n();
    let j_count = panel.occasions();
    let mut track = WeightTrack {
        n,
        occasions: j_count,
        iv: vec![0.0; n * j_count],
        iv1: vec![0.0; n * j_count],
        iv2: vec![0.0; n * j_count],
        inv_iv: vec![0.0; n * j_count],
        ..WeightTrack::default()
    };
    for i in 0..n {
        let mut log_sum = 0.0;
        let mut sign = 1.0f64;
        let mut inv = 1.0f64;
        for j in 0..j_count {
            let z = panel.z(i, j);
            let a = panel.a(i, j);
            let pz1 = clamped(f_z[j].predict(panel, i, &[]), clamp, &mut track.clamp_events);
            let fz = if z == 1 { pz1 } else { 1.0 - pz1 };
            let (d, floored) = delta[j].delta(panel, i, &[]);
            if floored {
                track.floor_events += 1;
            }
            let fs = f_star.prob(panel, i, j, a, &[]);
            if fs <= 0.0 {
                return Err(Error::Positivity(format!(
                    "reference density zero at subject {}, occasion {j}",
                    panel.id(i)
                )));
            }
            let sign_z = if z == 1 { 1.0 } else { -1.0 };
            let sign_a = if a == 1 { 1.0 } else { -1.0 };
            let w1 = sign_z * fz * d;
            let w2 = sign_a / fs;

            log_sum += fz.ln() + d.abs().ln() - fs.ln();
            sign *= sign_z * sign_a * d.signum();
            inv *= sign_z * sign_a * d.signum() * fs / (fz * d.abs());

            let idx = i * j_count + j;
            track.iv1[idx] = w1;
            track.iv2[idx] = w2;
            track.iv[idx] = sign * log_sum.exp();
            track.inv_iv[idx] = inv;

            let gap = (track.inv_iv[idx] * track.iv[idx] - 1.0).abs();
            if gap > track.max_reconcile_gap {
                track.max_reconcile_gap = gap;
            }
        }
    }
    if track.max_reconcile_gap > 1e-9 {
        return Err(Error::Numeric(format!(
            "inverse weight reconciliation gap {:.3e}",
            track.max_reconcile_gap
        )));
    }
    Ok(track)
}

/// Both weight families from one nuisance set, sharing the log-space
/// accumulation path (the collapse identity between the two families on
/// perfect-compliance panels is then exact).
pub fn compute_weights(panel: &Panel, nuis: &NuisanceSet) -> Result<WeightTrack> {
    let clamp = nuis.config.prob_clamp;
    let sra = sra_weights(panel, &nuis.f_a_sra, &nuis.f_star, clamp)?;
    let mut iv = iv_weights(panel, &nuis.f_z, &nuis.treat_w, &nuis.f_star, clamp)?;
    iv.sra = sra.sra;
    iv.clamp_events += sra.clamp_events;
    Ok(iv)
}

/// Summary of the applied weights `1/W(J-1)`: moments, sign balance,
/// clamp and floor counters, and the effective sample size
/// `(sum |w|)^2 / sum w^2`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WeightDiagnostics {
    pub n: usize,
    pub mean_abs: f64,
    /// Min, quartiles and max of `|1/W|`.
    pub quantiles_abs: [f64; 5],
    pub share_positive: f64,
    pub effective_sample_size: f64,
    pub clamp_events: usize,
    pub floor_events: usize,
}

pub fn weight_diagnostics(track: &WeightTrack) -> WeightDiagnostics {
    let j_last = track.occasions - 1;
    let applied: Vec<f64> = (0..track.n).map(|i| track.inv_iv_at(i, j_last)).collect();
    diagnostics_for(&applied, track.clamp_events, track.floor_events)
}

/// Diagnostics for an arbitrary vector of applied weights.
pub fn diagnostics_for(applied: &[f64], clamp_events: usize, floor_events: usize) -> WeightDiagnostics {
    let n = applied.len();
    let mut abs: Vec<f64> = applied.iter().map(|w| w.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sum_abs: f64 = abs.iter().sum();
    let sum_sq: f64 = applied.iter().map(|w| w * w).sum();
    let positive = applied.iter().filter(|w| **w > 0.0).count();
    WeightDiagnostics {
        n,
        mean_abs: sum_abs / n.max(1) as f64,
        quantiles_abs: [
            crate::util::quantile(&abs, 0.0),
            crate::util::quantile(&abs, 0.25),
            crate::util::quantile(&abs, 0.5),
            crate::util::quantile(&abs, 0.75),
            crate::util::quantile(&abs, 1.0),
        ],
        share_positive: positive as f64 / n.max(1) as f64,
        effective_sample_size: if sum_sq > 0.0 {
            sum_abs * sum_abs / sum_sq
        } else {
            0.0
        },
        clamp_events,
        floor_events,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, DgpSpec};
    use crate::nuisance::{
        DesignSpec, FStarMode, MisspecPattern, ModelForm, NuisanceConfig, NuisanceSet,
    };

    fn fitted(panel: &Panel) -> NuisanceSet {
        NuisanceSet::fit(
            panel,
            &MisspecPattern::all_correct(),
            &FStarMode::Uniform,
            &NuisanceConfig::default(),
        )
        .unwrap()
    }

    fn constant_model(v: f64) -> CondModel {
        CondModel {
            time: 0,
            design: DesignSpec {
                l_terms: vec![],
                z_times: vec![],
                a_times: vec![],
            },
            form: ModelForm::Saturated {
                cells: [(0u64, v)].into_iter().collect(),
                fallback: v,
            },
            prob_clamp: None,
        }
    }

    /// Hand-checkable single-occasion case: Z=1, A=1, f(Z=1)=0.5,
    /// delta=0.5, f*(A=1)=0.5 gives W1=0.25, W2=2, W=0.5, 1/W=2.
    #[test]
    fn single_occasion_weights_match_arithmetic() {
        let panel = Panel::from_parts(
            vec!["s1".into()],
            vec!["l".into()],
            vec![0.0, 1.5],
            vec![1],
            vec![1],
            vec![1.5],
            1,
            vec![],
            0,
        )
        .unwrap();
        let f_z = vec![constant_model(0.5)];
        let arms = vec![TreatmentArms {
            m0: constant_model(0.25),
            m1: constant_model(0.75),
            delta_floor: 0.01,
        }];
        let track = iv_weights(&panel, &f_z, &arms, &RefDensity::Uniform, 1e-8).unwrap();
        assert!((track.iv1_at(0, 0) - 0.25).abs() < 1e-15);
        assert!((track.iv2[0] - 2.0).abs() < 1e-15);
        assert!((track.iv_at(0, 0) - 0.5).abs() < 1e-15);
        assert!((track.inv_iv_at(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identity_measure_change_gives_unit_sra_weights() {
        let panel = simulate(&DgpSpec::desk_default(), 400, 21).unwrap();
        // Install f = f* = 0.5 on both sides of the ratio.
        let f_a = vec![constant_model(0.5), constant_model(0.5)];
        let track = sra_weights(&panel, &f_a, &RefDensity::Uniform, 1e-8).unwrap();
        for i in 0..panel.n() {
            for j in 0..panel.occasions() {
                assert_eq!(track.sra_at(i, j), 1.0);
            }
        }
    }

    #[test]
    fn unit_weights_give_full_effective_sample_size() {
        let n = 250;
        let track = WeightTrack {
            n,
            occasions: 1,
            inv_iv: vec![1.0; n],
            iv: vec![1.0; n],
            iv1: vec![1.0; n],
            iv2: vec![1.0; n],
            ..WeightTrack::default()
        };
        let diag = weight_diagnostics(&track);
        assert_eq!(diag.effective_sample_size, n as f64);
        assert_eq!(diag.share_positive, 1.0);
        assert_eq!(diag.mean_abs, 1.0);
    }

    #[test]
    fn cumulative_product_identity_and_sign_law() {
        let panel = simulate(&DgpSpec::desk_default(), 4000, 23).unwrap();
        let nuis = fitted(&panel);
        let track = compute_weights(&panel, &nuis).unwrap();
        for i in 0..panel.n() {
            let mut prev = 1.0;
            let mut sign = 1.0;
            for j in 0..panel.occasions() {
                let idx = i * panel.occasions() + j;
                let prod = prev * track.iv1[idx] * track.iv2[idx];
                let iv = track.iv_at(i, j);
                assert!(
                    (iv - prod).abs() <= 1e-12 * prod.abs().max(1.0),
                    "cumulative identity violated: {iv} vs {prod}"
                );
                let step_sign = if (1 - panel.z(i, j)) + (1 - panel.a(i, j)) == 1 {
                    -1.0
                } else {
                    1.0
                };
                sign *= step_sign;
                assert_eq!(iv.signum(), sign, "sign law violated");
                assert!(
                    (track.inv_iv_at(i, j) * iv - 1.0).abs() < 1e-10,
                    "reciprocal reconciliation"
                );
                prev = iv;
            }
        }
    }

    #[test]
    fn perfect_compliance_collapses_iv_to_sra_exactly() {
        let panel = simulate(&DgpSpec::desk_perfect_compliance(), 4000, 29).unwrap();
        let nuis = fitted(&panel);
        let track = compute_weights(&panel, &nuis).unwrap();
        for i in 0..panel.n() {
            for j in 0..panel.occasions() {
                assert_eq!(
                    track.iv_at(i, j),
                    track.sra_at(i, j),
                    "subject {i} occasion {j}"
                );
            }
        }
        let diag = weight_diagnostics(&track);
        assert_eq!(diag.share_positive, 1.0);
        assert_eq!(diag.floor_events, 0);
    }

    #[test]
    fn sample_mean_inverse_weight_is_one_with_saturated_fits() {
        // With saturated nuisances, summing 1/W over the panel telescopes
        // to exactly n.
        let panel = simulate(&DgpSpec::desk_default(), 20_000, 37).unwrap();
        let nuis = fitted(&panel);
        let track = compute_weights(&panel, &nuis).unwrap();
        let j_last = panel.occasions() - 1;
        let mean: f64 =
            (0..panel.n()).map(|i| track.inv_iv_at(i, j_last)).sum::<f64>() / panel.n() as f64;
        assert!((mean - 1.0).abs() < 1e-10, "mean {mean}");
    }
}
