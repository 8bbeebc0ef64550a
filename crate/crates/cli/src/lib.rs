//! Experiment runner behind the `msm-iv` binary: a JSON scenario config
//! drives simulation, estimator fits, oracle identity checks, robustness
//! matrices and efficiency comparisons, all emitting machine-readable
//! CSV/JSON reports. Every command is deterministic given the config
//! (seeded streams, no wall-clock anywhere in the outputs).

pub mod commands;
pub mod config;

pub use config::ScenarioConfig;

/// Process exit codes: 0 success, 2 configuration error, 3 numeric
/// failure, 4 identity-check failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ConfigError,
    NumericError,
    IdentityFailure,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::ConfigError => 2,
            Outcome::NumericError => 3,
            Outcome::IdentityFailure => 4,
        }
    }
}

/// Map a core error onto the exit taxonomy.
pub fn classify(err: &msm_iv_core::Error) -> Outcome {
    use msm_iv_core::Error;
    match err {
        Error::Config(_) | Error::InvalidDgp(_) | Error::Panel(_) | Error::Json(_) => {
            Outcome::ConfigError
        }
        Error::Io(_) | Error::Csv(_) => Outcome::NumericError,
        Error::Numeric(_)
        | Error::NoRoot { .. }
        | Error::Positivity(_)
        | Error::Relevance(_)
        | Error::Enumeration(_)
        | Error::Estimation(_) => Outcome::NumericError,
    }
}
