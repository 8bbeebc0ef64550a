//! Estimation of marginal structural models (MSMs) for time-varying binary
//! treatments when sequential randomization fails, using a time-varying
//! binary instrumental variable.
//!
//! The crate has three layers:
//!
//! * a data layer: longitudinal [`panel::Panel`] records, the MSM
//!   specification ([`msm::MsmSpec`]), and a fully discrete structural
//!   data-generating process ([`dgp::DgpSpec`]) with a latent confounder;
//! * an exact layer: [`oracle`] enumerates the joint law of a `DgpSpec` and
//!   computes counterfactual means, the target parameter, identity checks
//!   for the weighted-moment and influence-function results, and probability
//!   limits of every estimator under deliberate nuisance misspecification;
//! * a sample layer: [`nuisance`] fits the instrument density, treatment
//!   contrasts and sequential regressions, [`weights`] builds cumulative
//!   treatment and signed instrument weights, and [`estimators`] solves the
//!   five estimating equations (SRA-IPW, SRA-DR, IV-IPW, IV-MR, IV-efficient)
//!   with sandwich and bootstrap variances.
//!
//! [`study`] is a seeded replication harness for simulation studies.

pub mod dgp;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod msm;
pub mod nuisance;
pub mod oracle;
pub mod panel;
pub mod solve;
pub mod study;
pub mod util;
pub mod weights;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
