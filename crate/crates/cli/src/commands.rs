//! Command implementations. Every command writes into the output
//! directory and returns the aggregate outcome; reports carry the config
//! hash and seed so outputs are attributable and reproducible.

use std::fs;
use std::path::Path;

use msm_iv_core::dgp::{conditional_tables, simulate};
use msm_iv_core::estimators::{
    bootstrap_percentile, fit_estimator, Estimate, EstimatorId, FitSettings,
};
use msm_iv_core::msm::ModelFamily;
use msm_iv_core::nuisance::MisspecPattern;
use msm_iv_core::oracle::{weighted_moment_battery, IdentityReport, Oracle};
use msm_iv_core::panel::{load_panel, save_panel, CsvSchema};
use msm_iv_core::study::{run_replications, summarize_bias};
use msm_iv_core::util::fingerprint;
use msm_iv_core::Result;

use crate::config::ScenarioConfig;
use crate::Outcome;

#[derive(serde::Serialize)]
struct Provenance {
    seed: u64,
    config_hash: String,
    dgp_hash: String,
    tool: &'static str,
    version: &'static str,
}

fn provenance(config: &ScenarioConfig) -> Result<Provenance> {
    Ok(Provenance {
        seed: config.seed,
        config_hash: config.hash(),
        dgp_hash: fingerprint(&config.dgp.resolve()?),
        tool: "msm-iv",
        version: env!("CARGO_PKG_VERSION"),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// `simulate`: draw a panel, write it as CSV plus a provenance record.
pub fn cmd_simulate(config: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let spec = config.dgp.resolve()?;
    let panel = simulate(&spec, config.n, config.seed)?;
    fs::create_dir_all(out)?;
    save_panel(&panel, out.join("panel.csv"))?;
    write_json(&out.join("provenance.json"), &provenance(config)?)?;
    Ok(Outcome::Success)
}

#[derive(serde::Serialize)]
struct OracleReport {
    provenance: Provenance,
    target_beta: Vec<f64>,
    identities: Vec<IdentityReport>,
    plim_matrix: Vec<PlimRow>,
    all_identities_pass: bool,
}

#[derive(serde::Serialize)]
struct PlimRow {
    pattern: String,
    estimator: EstimatorId,
    plim: Vec<f64>,
    max_abs_bias: f64,
}

/// `oracle`: run every identity check and the probability-limit matrix on
/// the configured process; exit 4 when an identity fails.
pub fn cmd_oracle(config: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let spec = config.dgp.resolve()?;
    let v_cols: Vec<usize> = if config.baseline_columns.is_empty() {
        vec![]
    } else {
        vec![0]
    };
    let oracle = Oracle::new(&spec, &v_cols)?;
    let msm = config.msm.resolve(spec.occasions, v_cols.len())?;
    let beta0 = oracle.true_beta(&msm, &config.fstar)?;

    let mut identities = Vec::new();
    identities.push(oracle.check_instrument_contrast());
    for g in weighted_moment_battery(spec.occasions) {
        identities.push(oracle.check_weighted_moment(&g, &config.fstar)?);
    }
    identities.push(oracle.check_influence_zero(&msm, &config.fstar, &beta0)?);
    let mean_inv = oracle.mean_inv_weight(&config.fstar)?;
    identities.push(IdentityReport::new(
        "mean_one_reciprocal_weight",
        vec![mean_inv],
        vec![1.0],
        1e-12,
    ));

    let patterns: Vec<(String, MisspecPattern)> = vec![
        ("all_correct".into(), MisspecPattern::all_correct()),
        ("condition_i".into(), MisspecPattern::condition_i("l")),
        ("condition_ii".into(), MisspecPattern::condition_ii("l")),
        ("condition_iii".into(), MisspecPattern::condition_iii("l")),
        ("all_wrong".into(), MisspecPattern::all_wrong("l")),
    ];
    let mut plim_matrix = Vec::new();
    for (name, pattern) in &patterns {
        for estimator in &config.estimators {
            let plim = oracle.plim_solve(&msm, *estimator, pattern, &config.fstar)?;
            let max_abs_bias = plim
                .iter()
                .zip(&beta0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            plim_matrix.push(PlimRow {
                pattern: name.clone(),
                estimator: *estimator,
                plim,
                max_abs_bias,
            });
        }
    }

    let all_identities_pass = identities.iter().all(|r| r.pass);
    let report = OracleReport {
        provenance: provenance(config)?,
        target_beta: beta0,
        identities,
        plim_matrix,
        all_identities_pass,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("oracle_report.json"), &report)?;
    if report.all_identities_pass {
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::IdentityFailure)
    }
}

#[derive(serde::Serialize)]
struct FitReport {
    provenance: Provenance,
    estimates: Vec<Estimate>,
    bootstrap: Vec<Option<msm_iv_core::estimators::BootstrapCi>>,
    failures: Vec<String>,
}

/// `fit`: estimate every requested estimator on a panel file; write JSON
/// (full diagnostics) and a CSV summary row per estimator.
pub fn cmd_fit(config: &ScenarioConfig, panel_path: &Path, out: &Path) -> Result<Outcome> {
    let schema = CsvSchema {
        v_columns: config.baseline_columns.clone(),
        ..CsvSchema::default()
    };
    let panel = load_panel(panel_path, &schema)?;
    let msm = config
        .msm
        .resolve(panel.occasions(), panel.v_cols().len())?;

    let mut estimates = Vec::new();
    let mut bootstrap = Vec::new();
    let mut failures = Vec::new();
    for estimator in &config.estimators {
        let settings = FitSettings {
            estimator: *estimator,
            msm: msm.clone(),
            pattern: config.misspec.clone(),
            fstar: config.fstar.clone(),
            config: config.nuisance,
        };
        match fit_estimator(&panel, &settings) {
            Ok(est) => {
                if !est.converged {
                    failures.push(format!("{}: did not converge", estimator.name()));
                }
                let ci = if config.bootstrap > 0 {
                    Some(bootstrap_percentile(
                        &panel,
                        &settings,
                        config.bootstrap,
                        config.seed,
                        0.95,
                    )?)
                } else {
                    None
                };
                estimates.push(est);
                bootstrap.push(ci);
            }
            Err(e) => failures.push(format!("{}: {e}", estimator.name())),
        }
    }

    fs::create_dir_all(out)?;
    let mut writer = csv::Writer::from_path(out.join("estimates.csv"))?;
    let p = msm.dim_beta();
    let mut header = vec!["estimator".to_string(), "converged".into(), "eq_norm".into()];
    for k in 0..p {
        header.push(format!("beta_{k}"));
    }
    for k in 0..p {
        header.push(format!("se_{k}"));
    }
    writer.write_record(&header)?;
    for est in &estimates {
        let mut row = vec![
            est.estimator.name().to_string(),
            est.converged.to_string(),
            format!("{:.3e}", est.eq_norm),
        ];
        for b in &est.beta {
            row.push(format!("{b}"));
        }
        for s in &est.std_errors {
            row.push(format!("{s}"));
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;

    let ok = failures.is_empty();
    let report = FitReport {
        provenance: provenance(config)?,
        estimates,
        bootstrap,
        failures,
    };
    write_json(&out.join("estimates.json"), &report)?;
    if ok {
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::NumericError)
    }
}

/// `robustness`: population bias and finite-sample bias per estimator
/// across the misspecification patterns.
pub fn cmd_robustness(config: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let spec = config.dgp.resolve()?;
    let oracle = Oracle::new(&spec, &[])?;
    let msm = config.msm.resolve(spec.occasions, 0)?;
    let beta0 = oracle.true_beta(&msm, &config.fstar)?;

    let patterns: Vec<(&str, MisspecPattern)> = vec![
        ("all_correct", MisspecPattern::all_correct()),
        ("condition_i", MisspecPattern::condition_i("l")),
        ("condition_ii", MisspecPattern::condition_ii("l")),
        ("condition_iii", MisspecPattern::condition_iii("l")),
        ("all_wrong", MisspecPattern::all_wrong("l")),
    ];

    fs::create_dir_all(out)?;
    let mut writer = csv::Writer::from_path(out.join("robustness.csv"))?;
    writer.write_record([
        "pattern",
        "estimator",
        "plim_bias_max",
        "mc_bias_max",
        "mc_se_max",
    ])?;
    for (name, pattern) in &patterns {
        let settings: Vec<FitSettings> = config
            .estimators
            .iter()
            .map(|estimator| FitSettings {
                estimator: *estimator,
                msm: msm.clone(),
                pattern: pattern.clone(),
                fstar: config.fstar.clone(),
                config: config.nuisance,
            })
            .collect();
        let reps = run_replications(&spec, config.n, config.replications, config.seed, &settings)?;
        for (idx, estimator) in config.estimators.iter().enumerate() {
            let plim = oracle.plim_solve(&msm, *estimator, pattern, &config.fstar)?;
            let plim_bias = plim
                .iter()
                .zip(&beta0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let estimates: Vec<&Estimate> = reps.iter().map(|r| &r[idx]).collect();
            let summary = summarize_bias(&estimates, &beta0)?;
            let mc_bias = summary.bias.iter().map(|b| b.abs()).fold(0.0f64, f64::max);
            let mc_se = summary.mc_se.iter().copied().fold(0.0f64, f64::max);
            writer.write_record([
                name.to_string(),
                estimator.name().to_string(),
                format!("{plim_bias:.8e}"),
                format!("{mc_bias:.6e}"),
                format!("{mc_se:.6e}"),
            ])?;
        }
    }
    writer.flush()?;
    write_json(&out.join("provenance.json"), &provenance(config)?)?;
    Ok(Outcome::Success)
}

/// `efficiency`: enumerated asymptotic variances for the reweighted,
/// multiply robust (gradient and random index draws) and optimal-index
/// estimators, plus Monte Carlo variances at the configured sample size
/// with the exact population nuisances injected.
pub fn cmd_efficiency(config: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let spec = config.dgp.resolve()?;
    let oracle = Oracle::new(&spec, &[])?;
    let msm = config.msm.resolve(spec.occasions, 0)?;
    if msm.family != ModelFamily::TerminalMean {
        return Err(msm_iv_core::Error::Config(
            "efficiency comparisons need the terminal-mean family".into(),
        ));
    }
    let beta0 = oracle.true_beta(&msm, &config.fstar)?;
    let p = msm.dim_beta();

    let heff = oracle.heff(&msm, &config.fstar, &beta0)?;
    let avar_eff = oracle.avar_h(&msm, &config.fstar, &beta0, &heff)?;
    let avar_ipw = oracle.avar_iv_ipw(&msm, &config.fstar, &beta0)?;
    let avar_mr = oracle.avar_h(&msm, &config.fstar, &beta0, &oracle.h_grad_g(&msm)?)?;

    // Monte Carlo variances with known nuisances (comparable with the
    // enumerated variances, which also hold nuisances fixed).
    use msm_iv_core::estimators::{fit_efficient_iv, fit_ipw_iv, fit_mr_iv};
    use rayon::prelude::*;
    let truth = oracle.population_nuisances(
        &MisspecPattern::all_correct(),
        &config.fstar,
        &config.nuisance,
    )?;
    let reps: Vec<Result<(Estimate, Estimate, Estimate)>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            let seed = msm_iv_core::study::replicate_seed(config.seed, rep);
            let panel = simulate(&spec, config.n, seed)?;
            Ok((
                fit_ipw_iv(&panel, &msm, &truth)?,
                fit_mr_iv(&panel, &msm, &truth)?,
                fit_efficient_iv(&panel, &msm, &truth)?,
            ))
        })
        .collect();
    let reps: Vec<(Estimate, Estimate, Estimate)> = reps.into_iter().collect::<Result<_>>()?;
    let mc_var = |pick: &dyn Fn(&(Estimate, Estimate, Estimate)) -> &Estimate| -> Vec<f64> {
        (0..p)
            .map(|k| {
                let xs: Vec<f64> = reps.iter().map(|r| pick(r).beta[k]).collect();
                msm_iv_core::util::variance(&xs) * config.n as f64
            })
            .collect()
    };
    let mc_ipw = mc_var(&|r| &r.0);
    let mc_mr = mc_var(&|r| &r.1);
    let mc_eff = mc_var(&|r| &r.2);

    fs::create_dir_all(out)?;
    let mut writer = csv::Writer::from_path(out.join("efficiency.csv"))?;
    writer.write_record(["estimator", "coordinate", "enumerated_avar", "mc_var_scaled"])?;
    let rows: Vec<(&str, Vec<f64>, Option<Vec<f64>>)> = vec![
        ("iv_ipw", avar_ipw.diag(), Some(mc_ipw)),
        ("iv_mr", avar_mr.diag(), Some(mc_mr)),
        ("iv_eff", avar_eff.diag(), Some(mc_eff)),
    ];
    for (name, avar, mc) in &rows {
        for k in 0..p {
            writer.write_record([
                name.to_string(),
                k.to_string(),
                format!("{:.10e}", avar[k]),
                mc.as_ref()
                    .map(|v| format!("{:.10e}", v[k]))
                    .unwrap_or_default(),
            ])?;
        }
    }
    // Random index draws: enumerated variance only.
    for (d, h) in oracle
        .random_h(&msm, config.h_draws, config.seed)?
        .iter()
        .enumerate()
    {
        let avar = oracle.avar_h(&msm, &config.fstar, &beta0, h)?;
        for k in 0..p {
            writer.write_record([
                format!("iv_mr_h{d:02}"),
                k.to_string(),
                format!("{:.10e}", avar.at(k, k)),
                String::new(),
            ])?;
        }
    }
    writer.flush()?;
    write_json(&out.join("provenance.json"), &provenance(config)?)?;
    Ok(Outcome::Success)
}

/// Enumerate the joint law and write it as JSON (debug aid; capped J).
pub fn dump_law(config: &ScenarioConfig, out: &Path) -> Result<()> {
    let spec = config.dgp.resolve()?;
    let law = conditional_tables(&spec)?;
    fs::create_dir_all(out)?;
    write_json(
        &out.join("law.json"),
        &serde_json::json!({
            "occasions": law.occasions,
            "total_mass": law.total_mass(),
        }),
    )?;
    Ok(())
}
