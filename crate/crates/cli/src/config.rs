//! Scenario configuration schema (JSON).
//!
//! ```json
//! {
//!   "dgp": "desk",
//!   "n": 5000,
//!   "replications": 100,
//!   "seed": 42,
//!   "estimators": ["iv_ipw", "iv_mr"],
//!   "msm": "saturated",
//!   "fstar": { "mode": "uniform" },
//!   "misspec": { "omit_column": "l" },
//!   "bootstrap": 200,
//!   "baseline_columns": []
//! }
//! ```
//!
//! `dgp` is a builtin name, `{ "path": "spec.json" }`, or
//! `{ "inline": { ... } }`. `msm` is `"saturated"`,
//! `"saturated_with_baseline"`, `"linear"`, or an inline spec. The seed is
//! mandatory: no command has implicit nondeterminism.

use msm_iv_core::dgp::DgpSpec;
use msm_iv_core::estimators::EstimatorId;
use msm_iv_core::msm::MsmSpec;
use msm_iv_core::nuisance::{FStarMode, MisspecPattern, NuisanceConfig};
use msm_iv_core::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum DgpRef {
    Builtin(String),
    Path { path: String },
    Inline { inline: Box<DgpSpec> },
}

impl DgpRef {
    pub fn resolve(&self) -> Result<DgpSpec> {
        let spec = match self {
            DgpRef::Builtin(name) => match name.as_str() {
                "desk" => DgpSpec::desk_default(),
                "desk_unconfounded" => DgpSpec::desk_unconfounded(),
                "desk_perfect_compliance" => DgpSpec::desk_perfect_compliance(),
                "desk_j1" => DgpSpec::desk_j1(&msm_iv_core::dgp::DeskConfig::default()),
                "desk_assumption5_violating" => DgpSpec::desk_assumption5_violating(),
                other => {
                    return Err(Error::Config(format!("unknown builtin process {other:?}")));
                }
            },
            DgpRef::Path { path } => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text)?
            }
            DgpRef::Inline { inline } => (**inline).clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum MsmRef {
    Named(String),
    Inline(MsmSpec),
}

impl Default for MsmRef {
    fn default() -> Self {
        MsmRef::Named("saturated".into())
    }
}

impl MsmRef {
    pub fn resolve(&self, occasions: usize, n_baseline: usize) -> Result<MsmSpec> {
        let msm = match self {
            MsmRef::Named(name) => match name.as_str() {
                "saturated" => MsmSpec::saturated(occasions),
                "saturated_with_baseline" => MsmSpec::saturated_with_baseline(occasions),
                "linear" => MsmSpec::default_linear(n_baseline),
                other => return Err(Error::Config(format!("unknown msm {other:?}"))),
            },
            MsmRef::Inline(spec) => spec.clone(),
        };
        msm.validate(occasions, n_baseline)?;
        Ok(msm)
    }
}

fn default_estimators() -> Vec<EstimatorId> {
    vec![EstimatorId::IvIpw, EstimatorId::IvMr]
}

fn default_fstar() -> FStarMode {
    FStarMode::Uniform
}

fn default_bootstrap() -> usize {
    200
}

fn default_replications() -> usize {
    1
}

fn default_h_draws() -> usize {
    20
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub dgp: DgpRef,
    pub n: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorId>,
    #[serde(default)]
    pub msm: MsmRef,
    #[serde(default = "default_fstar")]
    pub fstar: FStarMode,
    #[serde(default)]
    pub misspec: MisspecPattern,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    /// Covariate column names declared as the baseline vector V.
    #[serde(default)]
    pub baseline_columns: Vec<String>,
    /// Percentile bootstrap resamples for `fit`.
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    /// Random index-matrix draws for `efficiency`.
    #[serde(default = "default_h_draws")]
    pub h_draws: usize,
}

impl ScenarioConfig {
    pub fn load(path: &std::path::Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: ScenarioConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        self.dgp.resolve()?;
        Ok(())
    }

    /// Hash of the canonical serialized config, embedded in every output.
    pub fn hash(&self) -> String {
        msm_iv_core::util::fingerprint(self)
    }

    /// Baseline column indices for the single-covariate desk panels.
    pub fn v_cols(&self, l_names: &[String]) -> Result<Vec<usize>> {
        self.baseline_columns
            .iter()
            .map(|name| {
                l_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::Config(format!("baseline column {name:?} unknown")))
            })
            .collect()
    }
}
