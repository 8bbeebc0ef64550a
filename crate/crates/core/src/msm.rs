//! Marginal structural model specifications.
//!
//! The mean function is a linear predictor in declared features of the
//! treatment regime and the baseline vector:
//! `g(a, v; beta) = beta' x(a, v)`. Two model families are supported: a
//! terminal-outcome mean `E(Y_a | V) = g(a, V; beta)` and repeated-measures
//! means `E(Y_a(m) | V) = g_m(a(m-1), V; beta)` where `g_m` evaluates the
//! same features on the regime truncated at `m`.

use crate::panel::Panel;
use crate::{Error, Result};

/// One term of the linear predictor.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feature {
    Intercept,
    /// `a(time)`
    TreatmentAt { time: usize },
    /// `sum_j a(j)`
    TreatmentTotal,
    /// `prod_{j in times} a(j)`; empty product is the intercept
    TreatmentProduct { times: Vec<usize> },
    /// `v[index]` (position within the panel's declared baseline columns)
    BaselineAt { index: usize },
    /// `v[index] * prod_{j in times} a(j)`
    TreatmentByBaseline { times: Vec<usize>, index: usize },
}

impl Feature {
    /// Evaluate on a regime truncated at `horizon`: treatments at times at
    /// or beyond the horizon have not been delivered yet and count as zero.
    fn eval(&self, regime: &[u8], v: &[f64], horizon: usize) -> f64 {
        let a = |t: usize| -> f64 {
            if t < horizon {
                f64::from(regime[t])
            } else {
                0.0
            }
        };
        match self {
            Feature::Intercept => 1.0,
            Feature::TreatmentAt { time } => a(*time),
            Feature::TreatmentTotal => (0..regime.len().min(horizon)).map(|t| f64::from(regime[t])).sum(),
            Feature::TreatmentProduct { times } => times.iter().map(|&t| a(t)).product(),
            Feature::BaselineAt { index } => v[*index],
            Feature::TreatmentByBaseline { times, index } => {
                v[*index] * times.iter().map(|&t| a(t)).product::<f64>()
            }
        }
    }

    fn max_time(&self) -> Option<usize> {
        match self {
            Feature::TreatmentAt { time } => Some(*time),
            Feature::TreatmentProduct { times } | Feature::TreatmentByBaseline { times, .. } => {
                times.iter().copied().max()
            }
            _ => None,
        }
    }

    fn baseline_index(&self) -> Option<usize> {
        match self {
            Feature::BaselineAt { index } | Feature::TreatmentByBaseline { index, .. } => Some(*index),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// Single terminal outcome Y = Y(J).
    TerminalMean,
    /// Outcome series Y(1..J); the index function is p x J.
    RepeatedMeasures,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MsmSpec {
    pub family: ModelFamily,
    pub features: Vec<Feature>,
}

impl MsmSpec {
    pub fn dim_beta(&self) -> usize {
        self.features.len()
    }

    /// Default model: intercept, cumulative treatment, and one slope per
    /// declared baseline column.
    pub fn default_linear(n_baseline: usize) -> MsmSpec {
        let mut features = vec![Feature::Intercept, Feature::TreatmentTotal];
        for index in 0..n_baseline {
            features.push(Feature::BaselineAt { index });
        }
        MsmSpec {
            family: ModelFamily::TerminalMean,
            features,
        }
    }

    /// Saturated model over the `2^J` regimes: one product term per subset
    /// of occasions, so `g` can match any counterfactual mean vector.
    pub fn saturated(occasions: usize) -> MsmSpec {
        let mut features = Vec::with_capacity(1 << occasions);
        for mask in 0..(1usize << occasions) {
            if mask == 0 {
                features.push(Feature::Intercept);
            } else {
                let times = (0..occasions).filter(|j| mask >> j & 1 == 1).collect();
                features.push(Feature::TreatmentProduct { times });
            }
        }
        MsmSpec {
            family: ModelFamily::TerminalMean,
            features,
        }
    }

    /// Saturated in the regime with every term also interacted with one
    /// baseline column: correctly specified for any discrete V of one column.
    pub fn saturated_with_baseline(occasions: usize) -> MsmSpec {
        let base = MsmSpec::saturated(occasions);
        let mut features = base.features.clone();
        for f in &base.features {
            features.push(match f {
                Feature::Intercept => Feature::BaselineAt { index: 0 },
                Feature::TreatmentProduct { times } => Feature::TreatmentByBaseline {
                    times: times.clone(),
                    index: 0,
                },
                _ => unreachable!(),
            });
        }
        MsmSpec {
            family: ModelFamily::TerminalMean,
            features,
        }
    }

    /// Check the spec is evaluable on every regime for this panel shape.
    pub fn validate(&self, occasions: usize, n_baseline: usize) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Config("MSM needs at least one feature".into()));
        }
        for f in &self.features {
            if let Some(t) = f.max_time() {
                if t >= occasions {
                    return Err(Error::Config(format!(
                        "feature refers to occasion {t} but J = {occasions}"
                    )));
                }
            }
            if let Some(i) = f.baseline_index() {
                if i >= n_baseline {
                    return Err(Error::Config(format!(
                        "feature refers to baseline column {i} but only {n_baseline} declared"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Design row x(a, v) with the regime truncated at `horizon`.
    pub fn design_row_at(&self, regime: &[u8], v: &[f64], horizon: usize) -> Vec<f64> {
        self.features.iter().map(|f| f.eval(regime, v, horizon)).collect()
    }

    pub fn design_row(&self, regime: &[u8], v: &[f64]) -> Vec<f64> {
        self.design_row_at(regime, v, regime.len())
    }

    /// Terminal mean function `g(a, v; beta)`.
    pub fn g(&self, regime: &[u8], v: &[f64], beta: &[f64]) -> f64 {
        self.design_row(regime, v)
            .iter()
            .zip(beta)
            .map(|(x, b)| x * b)
            .sum()
    }

    /// Repeated-measures mean `g_m(a(m-1), v; beta)` for `m = 1..=J`.
    pub fn g_m(&self, m: usize, regime: &[u8], v: &[f64], beta: &[f64]) -> f64 {
        self.design_row_at(regime, v, m)
            .iter()
            .zip(beta)
            .map(|(x, b)| x * b)
            .sum()
    }

    /// Residual vector entering the estimating function: a single terminal
    /// residual, or one residual per measurement occasion.
    pub fn residuals(&self, panel: &Panel, i: usize, beta: &[f64]) -> Vec<f64> {
        let v = panel.v(i);
        let a = panel.a_seq(i);
        match self.family {
            ModelFamily::TerminalMean => vec![panel.y(i) - self.g(a, &v, beta)],
            ModelFamily::RepeatedMeasures => (1..=panel.occasions())
                .map(|m| panel.y_at(i, m) - self.g_m(m, a, &v, beta))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_design_is_invertible_basis() {
        let msm = MsmSpec::saturated(2);
        assert_eq!(msm.dim_beta(), 4);
        // g over the four regimes with beta = e_k spans distinct patterns.
        let regimes: [[u8; 2]; 4] = [[0, 0], [0, 1], [1, 0], [1, 1]];
        let rows: Vec<Vec<f64>> = regimes.iter().map(|r| msm.design_row(r, &[])).collect();
        let m = crate::linalg::Mat::from_rows(&rows);
        assert!(m.inverse().is_ok());
    }

    #[test]
    fn truncated_means_ignore_future_treatment() {
        let msm = MsmSpec {
            family: ModelFamily::RepeatedMeasures,
            features: vec![Feature::Intercept, Feature::TreatmentTotal],
        };
        let beta = [1.0, 2.0];
        // g_1 sees only a(0)
        assert_eq!(msm.g_m(1, &[1, 1], &[], &beta), 3.0);
        assert_eq!(msm.g_m(2, &[1, 1], &[], &beta), 5.0);
    }

    #[test]
    fn validate_rejects_out_of_range_times() {
        let msm = MsmSpec {
            family: ModelFamily::TerminalMean,
            features: vec![Feature::TreatmentAt { time: 3 }],
        };
        assert!(msm.validate(2, 0).is_err());
        assert!(msm.validate(4, 0).is_ok());
    }
}
