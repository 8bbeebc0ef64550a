//! Sample estimators against enumerated truths: consistency at moderate
//! sample sizes, agreement with probability limits under confounding, the
//! affine structure of the sequential regressions, and a strict efficiency
//! comparison on a correctly specified lower-dimensional model.

use msm_iv_core::dgp::{simulate, DeskConfig, DgpSpec, HistTable, Var};
use msm_iv_core::estimators::{
    bootstrap_percentile, d_sm, fit_estimator, fit_ipw_iv, fit_ipw_sra, fit_mr_iv, EstimatorId,
    FitSettings,
};
use msm_iv_core::msm::{Feature, ModelFamily, MsmSpec};
use msm_iv_core::nuisance::{
    fit_psi_recursion, FStarMode, MisspecPattern, NuisanceConfig, NuisanceSet,
};
use msm_iv_core::oracle::Oracle;
use msm_iv_core::panel::Panel;

const UNIFORM: FStarMode = FStarMode::Uniform;

fn fitted(panel: &Panel) -> NuisanceSet {
    NuisanceSet::fit(
        panel,
        &MisspecPattern::all_correct(),
        &UNIFORM,
        &NuisanceConfig::default(),
    )
    .unwrap()
}

fn assert_within_se(est: &msm_iv_core::estimators::Estimate, target: &[f64], factor: f64) {
    for k in 0..target.len() {
        let half = factor * est.std_errors[k].max(1e-6);
        assert!(
            (est.beta[k] - target[k]).abs() <= half,
            "coordinate {k}: {} vs {} (allow {half})",
            est.beta[k],
            target[k]
        );
    }
}

#[test]
fn iv_estimators_are_consistent_on_the_confounded_process() {
    let spec = DgpSpec::desk_default();
    let oracle = Oracle::new(&spec, &[]).unwrap();
    let msm = MsmSpec::saturated(2);
    let beta0 = oracle.true_beta(&msm, &UNIFORM).unwrap();

    let panel = simulate(&spec, 20_000, 2024).unwrap();
    let nuis = fitted(&panel);
    let ipw = fit_ipw_iv(&panel, &msm, &nuis).unwrap();
    let mr = fit_mr_iv(&panel, &msm, &nuis).unwrap();
    assert!(ipw.converged && mr.converged);
    assert_within_se(&ipw, &beta0, 4.0);
    assert_within_se(&mr, &beta0, 4.0);

    // The augmentation-free and augmented fits agree to sampling noise.
    for k in 0..beta0.len() {
        let gap = (ipw.beta[k] - mr.beta[k]).abs();
        let scale = (ipw.std_errors[k] * ipw.std_errors[k]
            + mr.std_errors[k] * mr.std_errors[k])
            .sqrt();
        assert!(gap <= 4.0 * scale, "coordinate {k}: {gap} vs scale {scale}");
    }
}

#[test]
fn efficient_estimator_is_consistent() {
    let spec = DgpSpec::desk_default();
    let oracle = Oracle::new(&spec, &[]).unwrap();
    let msm = MsmSpec::saturated(2);
    let beta0 = oracle.true_beta(&msm, &UNIFORM).unwrap();
    let panel = simulate(&spec, 20_000, 777).unwrap();
    let settings = FitSettings {
        estimator: EstimatorId::IvEff,
        msm: msm.clone(),
        pattern: MisspecPattern::all_correct(),
        fstar: UNIFORM,
        config: NuisanceConfig::default(),
    };
    let est = fit_estimator(&panel, &settings).unwrap();
    assert!(est.converged);
    assert_within_se(&est, &beta0, 4.0);
}

#[test]
fn sra_estimator_converges_to_its_biased_limit() {
    let spec = DgpSpec::desk_default();
    let oracle = Oracle::new(&spec, &[]).unwrap();
    let msm = MsmSpec::saturated(2);
    let plim = oracle
        .plim_solve(
            &msm,
            EstimatorId::SraIpw,
            &MisspecPattern::all_correct(),
            &UNIFORM,
        )
        .unwrap();
    let panel = simulate(&spec, 20_000, 31337).unwrap();
    let est = fit_ipw_sra(&panel, &msm, &fitted(&panel)).unwrap();
    assert_within_se(&est, &plim, 4.0);
}

#[test]
fn unconfounded_process_makes_sra_consistent() {
    let spec = DgpSpec::desk_unconfounded();
    let oracle = Oracle::new(&spec, &[]).unwrap();
    let msm = MsmSpec::saturated(2);
    let beta0 = oracle.true_beta(&msm, &UNIFORM).unwrap();
    let panel = simulate(&spec, 20_000, 555).unwrap();
    let est = fit_ipw_sra(&panel, &msm, &fitted(&panel)).unwrap();
    assert_within_se(&est, &beta0, 4.0);
}

#[test]
fn repeated_measures_estimators_track_the_series_target() {
    let spec = DgpSpec::desk_default();
    let oracle = Oracle::new(&spec, &[]).unwrap();
    let msm = MsmSpec {
        family: ModelFamily::RepeatedMeasures,
        features: vec![
            Feature::Intercept,
            Feature::TreatmentAt { time: 0 },
            Feature::TreatmentAt { time: 1 },
        ],
    };
    let beta0 = oracle.true_beta(&msm, &UNIFORM).unwrap();
    let panel = simulate(&spec, 20_000, 99).unwrap();
    let nuis = fitted(&panel);
    let ipw = fit_ipw_iv(&panel, &msm, &nuis).unwrap();
    let mr = fit_mr_iv(&panel, &msm, &nuis).unwrap();
    assert_within_se(&ipw, &beta0, 4.0);
    assert_within_se(&mr, &beta0, 4.0);
}

#[test]
fn psi_recursion_is_affine_in_beta() {
    let panel = simulate(&DgpSpec::desk_default(), 4000, 7).unwrap();
    let nuis = fitted(&panel);
    let msm = MsmSpec::saturated(2);
    let b1 = vec![0.2, -0.4, 1.0, 0.3];
    let b2 = vec![1.4, 0.8, -0.6, 0.9];
    let mid: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| 0.5 * (a + b)).collect();
    let source = |beta: &[f64]| -> Vec<Vec<f64>> {
        (0..panel.n()).map(|i| d_sm(&msm, &panel, i, beta)).collect()
    };
    let s1 = fit_psi_recursion(&panel, &nuis, &source(&b1)).unwrap();
    let s2 = fit_psi_recursion(&panel, &nuis, &source(&b2)).unwrap();
    let sm = fit_psi_recursion(&panel, &nuis, &source(&mid)).unwrap();
    for j in 0..panel.occasions() {
        for i in (0..panel.n()).step_by(61) {
            for d in 0..msm.dim_beta() {
                let interp = 0.5 * (s1.gamma1(j, i)[d] + s2.gamma1(j, i)[d]);
                assert!(
                    (sm.gamma1(j, i)[d] - interp).abs() < 1e-10,
                    "gamma1 not affine at j={j}, i={i}, d={d}"
                );
                let interp0 = 0.5 * (s1.gamma0(j, i)[d] + s2.gamma0(j, i)[d]);
                assert!((sm.gamma0(j, i)[d] - interp0).abs() < 1e-10);
            }
        }
    }
}

/// Desk variant without a treatment interaction in the outcome: the
/// three-parameter model (intercept, a0, a1) is then exactly specified
/// while the regime count stays four, so index matrices genuinely differ
/// in efficiency.
fn desk_no_interaction() -> DgpSpec {
    let mut spec = DgpSpec::desk_default();
    let cfg = DeskConfig::default();
    spec.mu_y = HistTable::build(
        vec![Var::u(0), Var::u(1), Var::l(0), Var::l(1), Var::a(0), Var::a(1)],
        |h| {
            cfg.confounding * (f64::from(h(Var::u(0))) + f64::from(h(Var::u(1))))
                + 0.6 * f64::from(h(Var::l(0)))
                + 0.8 * f64::from(h(Var::l(1)))
                + 1.0 * f64::from(h(Var::a(0)))
                + 1.2 * f64::from(h(Var::a(1)))
        },
    );
    spec
}

#[test]
fn strict_efficiency_gain_on_a_lower_dimensional_model() {
    let spec = desk_no_interaction();
    let oracle = Oracle::new(&spec, &[]).unwrap();
    let msm = MsmSpec {
        family: ModelFamily::TerminalMean,
        features: vec![
            Feature::Intercept,
            Feature::TreatmentAt { time: 0 },
            Feature::TreatmentAt { time: 1 },
        ],
    };
    // Exact specification: the target interpolates every regime mean.
    let beta0 = oracle.true_beta(&msm, &UNIFORM).unwrap();
    for regime in msm_iv_core::panel::enumerate_regimes(2).unwrap() {
        let m = oracle.counterfactual_mean(regime.bits(), None).unwrap();
        let g = msm.g(regime.bits(), &[], &beta0);
        assert!((m - g).abs() < 1e-10, "model not saturated by accident");
    }

    let heff = oracle.heff(&msm, &UNIFORM, &beta0).unwrap();
    let avar_eff = oracle.avar_h(&msm, &UNIFORM, &beta0, &heff).unwrap();
    let avar_grad = oracle
        .avar_h(&msm, &UNIFORM, &beta0, &oracle.h_grad_g(&msm).unwrap())
        .unwrap();
    let mut strictly_better = false;
    for d in 0..msm.dim_beta() {
        assert!(avar_eff.at(d, d) <= avar_grad.at(d, d) + 1e-10);
        if avar_eff.at(d, d) < avar_grad.at(d, d) - 1e-6 {
            strictly_better = true;
        }
    }
    assert!(
        strictly_better,
        "optimal index should strictly dominate the gradient index here: {:?} vs {:?}",
        avar_eff.diag(),
        avar_grad.diag()
    );
    for h in oracle.random_h(&msm, 20, 4242).unwrap() {
        let avar = oracle.avar_h(&msm, &UNIFORM, &beta0, &h).unwrap();
        for d in 0..msm.dim_beta() {
            assert!(avar_eff.at(d, d) <= avar.at(d, d) + 1e-10);
        }
    }
}

#[test]
fn bootstrap_interval_brackets_the_estimate() {
    let spec = DgpSpec::desk_default();
    let panel = simulate(&spec, 2000, 4711).unwrap();
    let settings = FitSettings {
        estimator: EstimatorId::IvMr,
        msm: MsmSpec::saturated(2),
        pattern: MisspecPattern::all_correct(),
        fstar: UNIFORM,
        config: NuisanceConfig::default(),
    };
    let est = fit_estimator(&panel, &settings).unwrap();
    let ci = bootstrap_percentile(&panel, &settings, 60, 8, 0.95).unwrap();
    assert_eq!(ci.replicates, 60);
    for k in 0..est.beta.len() {
        assert!(ci.lower[k] < ci.upper[k]);
        assert!(
            ci.lower[k] < est.beta[k] && est.beta[k] < ci.upper[k],
            "estimate outside its own bootstrap interval"
        );
    }
}
