//! Nuisance models fitted from sample data: the instrument density
//! `f(Z(j) | L(j), A(j-1), Z(j-1))`, the per-arm treatment means whose
//! contrast identifies the instrument effect `delta_j`, the treatment
//! density under sequential randomization, the user-chosen reference
//! density `f*`, and the backward sequential regressions (the Psi/Gamma
//! recursion for the multiply robust estimator and the C recursion for the
//! doubly robust one).
//!
//! Deliberate misspecification is injected through [`MisspecPattern`]: each
//! flagged nuisance drops a named covariate column from its fitting design,
//! which at the population level equals marginalizing that column out.
//!
//! Saturated (cell-mean) fits are the default whenever the conditioning
//! variables are all binary; otherwise logistic (probabilities) or linear
//! (pseudo-outcomes) working models are used.

use std::collections::BTreeMap;

use crate::dgp::HistTable;
use crate::linalg::Mat;
use crate::panel::Panel;
use crate::util::fingerprint;
use crate::{Error, Result};

/// Clamps and floors applied to fitted quantities. All configurable; the
/// defaults are probability clamp 1e-8 and instrument-effect floor 0.01.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NuisanceConfig {
    pub prob_clamp: f64,
    pub delta_floor: f64,
    pub ridge: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            prob_clamp: 1e-8,
            delta_floor: 0.01,
            ridge: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    #[default]
    Correct,
    OmitCovariate,
}

impl Flag {
    pub fn is_omit(self) -> bool {
        self == Flag::OmitCovariate
    }
}

/// Which nuisances are deliberately misspecified. `omit_column` names the
/// covariate column dropped from every flagged design.
///
/// The six instrument-side flags configure the multiply robust estimator's
/// robustness conditions; `sra_treatment` and `cj` configure the two halves
/// of the doubly robust estimator under sequential randomization.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MisspecPattern {
    pub instrument_density: Flag,
    pub delta: Flag,
    pub treatment_mean: Flag,
    pub psi1: Flag,
    pub psi0: Flag,
    pub reference_density: Flag,
    pub sra_treatment: Flag,
    pub cj: Flag,
    pub omit_column: Option<String>,
}

impl MisspecPattern {
    pub fn all_correct() -> MisspecPattern {
        MisspecPattern::default()
    }

    fn with_all_wrong(col: &str) -> MisspecPattern {
        MisspecPattern {
            instrument_density: Flag::OmitCovariate,
            delta: Flag::OmitCovariate,
            treatment_mean: Flag::OmitCovariate,
            psi1: Flag::OmitCovariate,
            psi0: Flag::OmitCovariate,
            reference_density: Flag::Correct,
            sra_treatment: Flag::OmitCovariate,
            cj: Flag::OmitCovariate,
            omit_column: Some(col.to_string()),
        }
    }

    /// Everything misspecified (negative control).
    pub fn all_wrong(col: &str) -> MisspecPattern {
        Self::with_all_wrong(col)
    }

    /// Minimal pattern satisfying only robustness condition (i): the
    /// signed weights (instrument density and delta) are correct.
    pub fn condition_i(col: &str) -> MisspecPattern {
        MisspecPattern {
            instrument_density: Flag::Correct,
            delta: Flag::Correct,
            ..Self::with_all_wrong(col)
        }
    }

    /// Condition (ii): instrument density and Gamma^(1) correct.
    pub fn condition_ii(col: &str) -> MisspecPattern {
        MisspecPattern {
            instrument_density: Flag::Correct,
            psi1: Flag::Correct,
            ..Self::with_all_wrong(col)
        }
    }

    /// Condition (iii): Gamma^(1), Gamma^(0) and the treatment mean
    /// correct. The mean decomposes as `delta_hat * Z(j) + mA0`, sharing
    /// the weights' contrast, so its correctness requires the delta flag
    /// correct as well; the weights stay wrong through the instrument
    /// density.
    pub fn condition_iii(col: &str) -> MisspecPattern {
        MisspecPattern {
            psi1: Flag::Correct,
            psi0: Flag::Correct,
            treatment_mean: Flag::Correct,
            delta: Flag::Correct,
            ..Self::with_all_wrong(col)
        }
    }

    pub fn any_omit(&self) -> bool {
        [
            self.instrument_density,
            self.delta,
            self.treatment_mean,
            self.psi1,
            self.psi0,
            self.reference_density,
            self.sra_treatment,
            self.cj,
        ]
        .iter()
        .any(|f| f.is_omit())
    }

    /// Resolve the omitted column to an index into the panel's covariates.
    pub fn omit_index(&self, l_names: &[String]) -> Result<Option<usize>> {
        if !self.any_omit() {
            return Ok(None);
        }
        let name = self
            .omit_column
            .as_deref()
            .ok_or_else(|| Error::Config("misspec pattern needs omit_column".into()))?;
        let idx = l_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("omit_column {name:?} is not a covariate")))?;
        Ok(Some(idx))
    }
}

/// Reference treatment density choices.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FStarMode {
    /// 0.5 for both arms at every occasion.
    Uniform,
    /// Fit `E(A(k) | V, A(k-1))` from the panel.
    Fitted,
    /// User tables per occasion, keyed over `l0` (standing for the first
    /// baseline column, which must be binary) and past treatments,
    /// e.g. `"l0=1,a0=0" -> p`.
    Table { tables: Vec<HistTable> },
}

/// Variable override when evaluating a fitted model away from the observed
/// path (flip an instrument or treatment coordinate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ov {
    Z(usize, u8),
    A(usize, u8),
}

/// The conditioning design of one fitted model: covariate terms
/// `(time, column)`, instrument times and treatment times, in that order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DesignSpec {
    pub l_terms: Vec<(usize, usize)>,
    pub z_times: Vec<usize>,
    pub a_times: Vec<usize>,
}

impl DesignSpec {
    pub fn len(&self) -> usize {
        self.l_terms.len() + self.z_times.len() + self.a_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Design for `f(Z(j) | L(0..j), A(0..j-1), Z(0..j-1))`.
    pub fn instrument(j: usize, l_cols: usize, omit: Option<usize>) -> DesignSpec {
        DesignSpec {
            l_terms: l_grid(j + 1, l_cols, omit),
            z_times: (0..j).collect(),
            a_times: (0..j).collect(),
        }
    }

    /// Design for the per-arm treatment means at occasion `j` (the arm
    /// split on `Z(j)` is handled outside the design).
    pub fn treatment(j: usize, l_cols: usize, omit: Option<usize>) -> DesignSpec {
        DesignSpec::instrument(j, l_cols, omit)
    }

    /// Design for the sequential-randomization treatment density
    /// `f(A(j) | L(0..j), A(0..j-1))`: no instrument terms.
    pub fn sra_treatment(j: usize, l_cols: usize, omit: Option<usize>) -> DesignSpec {
        DesignSpec {
            l_terms: l_grid(j + 1, l_cols, omit),
            z_times: Vec::new(),
            a_times: (0..j).collect(),
        }
    }

    /// Design for the Psi regression at occasion `j`:
    /// `(A(0..j-1), L(0..j), Z(0..j))` - note `Z(j)` is included.
    pub fn psi(j: usize, l_cols: usize, omit: Option<usize>) -> DesignSpec {
        DesignSpec {
            l_terms: l_grid(j + 1, l_cols, omit),
            z_times: (0..=j).collect(),
            a_times: (0..j).collect(),
        }
    }

    /// Design for the C regression at occasion `j`: `(A(0..j), L(0..j))`.
    pub fn c_regression(j: usize, l_cols: usize, omit: Option<usize>) -> DesignSpec {
        DesignSpec {
            l_terms: l_grid(j + 1, l_cols, omit),
            z_times: Vec::new(),
            a_times: (0..=j).collect(),
        }
    }

    /// Design for the fitted reference density at occasion `k`:
    /// `(V, A(0..k-1))`.
    pub fn reference(k: usize, v_cols: &[usize]) -> DesignSpec {
        DesignSpec {
            l_terms: v_cols.iter().map(|&c| (0usize, c)).collect(),
            z_times: Vec::new(),
            a_times: (0..k).collect(),
        }
    }

    pub fn values(&self, panel: &Panel, i: usize, ovs: &[Ov]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for &(t, c) in &self.l_terms {
            out.push(panel.l(i, t, c));
        }
        for &t in &self.z_times {
            let mut v = panel.z(i, t);
            for ov in ovs {
                if let Ov::Z(ot, val) = ov {
                    if *ot == t {
                        v = *val;
                    }
                }
            }
            out.push(f64::from(v));
        }
        for &t in &self.a_times {
            let mut v = panel.a(i, t);
            for ov in ovs {
                if let Ov::A(ot, val) = ov {
                    if *ot == t {
                        v = *val;
                    }
                }
            }
            out.push(f64::from(v));
        }
        out
    }

    /// Packed cell key without materializing the value vector; `None`
    /// when a covariate term is not 0/1.
    #[inline]
    pub fn pack(&self, panel: &Panel, i: usize, ovs: &[Ov]) -> Option<u64> {
        let mut key = 0u64;
        let mut pos = 0usize;
        for &(t, c) in &self.l_terms {
            let v = panel.l(i, t, c);
            if v == 1.0 {
                key |= 1 << pos;
            } else if v != 0.0 {
                return None;
            }
            pos += 1;
        }
        for &t in &self.z_times {
            let mut v = panel.z(i, t);
            for ov in ovs {
                if let Ov::Z(ot, val) = ov {
                    if *ot == t {
                        v = *val;
                    }
                }
            }
            key |= u64::from(v) << pos;
            pos += 1;
        }
        for &t in &self.a_times {
            let mut v = panel.a(i, t);
            for ov in ovs {
                if let Ov::A(ot, val) = ov {
                    if *ot == t {
                        v = *val;
                    }
                }
            }
            key |= u64::from(v) << pos;
            pos += 1;
        }
        Some(key)
    }

    /// True when every design value over the panel is 0 or 1, so a
    /// saturated cell-mean fit is exact.
    pub fn is_binary(&self, panel: &Panel) -> bool {
        self.l_terms.iter().all(|&(t, c)| {
            (0..panel.n()).all(|i| {
                let v = panel.l(i, t, c);
                v == 0.0 || v == 1.0
            })
        })
    }
}

fn l_grid(times: usize, l_cols: usize, omit: Option<usize>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in 0..times {
        for c in 0..l_cols {
            if Some(c) != omit {
                out.push((t, c));
            }
        }
    }
    out
}


fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Iteratively reweighted least squares for a Bernoulli response with an
/// intercept prepended to the supplied design rows.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LogisticFit {
    /// Intercept first, then one coefficient per design column.
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
}

/// IRLS with ridge 1e-8 on the weighted Gram, gradient tolerance 1e-10 and
/// at most 100 sweeps; deterministic. Separation is flagged when the
/// coefficient norm passes 30 and the fit is returned as-is.
pub fn fit_logistic(rows: &[Vec<f64>], y: &[f64], weights: Option<&[f64]>) -> Result<LogisticFit> {
    let n = rows.len();
    if n == 0 || y.len() != n {
        return Err(Error::Estimation(
            "logistic fit needs matching rows and responses".into(),
        ));
    }
    let k = rows.first().map_or(0, Vec::len);
    let p = k + 1;
    if n <= p {
        return Err(Error::Estimation(format!(
            "logistic fit needs n > p, got n = {n}, p = {p}"
        )));
    }
    let w_of = |i: usize| weights.map_or(1.0, |w| w[i]);

    let mut coef = vec![0.0; p];
    let mut iterations = 0;
    let mut separation = false;
    let mut converged = false;
    for iter in 1..=100 {
        iterations = iter;
        let mut grad = vec![0.0; p];
        let mut hess = Mat::zeros(p, p);
        for i in 0..n {
            let eta = coef[0]
                + rows[i]
                    .iter()
                    .zip(&coef[1..])
                    .map(|(x, b)| x * b)
                    .sum::<f64>();
            let mu = expit(eta);
            let wi = w_of(i);
            let resid = wi * (y[i] - mu);
            let wvar = wi * mu * (1.0 - mu);
            grad[0] += resid;
            hess.add_at(0, 0, wvar);
            for a in 0..k {
                grad[a + 1] += resid * rows[i][a];
                hess.add_at(0, a + 1, wvar * rows[i][a]);
                hess.add_at(a + 1, 0, wvar * rows[i][a]);
                for b in 0..k {
                    hess.add_at(a + 1, b + 1, wvar * rows[i][a] * rows[i][b]);
                }
            }
        }
        if crate::linalg::inf_norm(&grad) < 1e-10 {
            converged = true;
            break;
        }
        hess.add_ridge(1e-8);
        let step = hess.solve_vec(&grad)?;
        for (c, s) in coef.iter_mut().zip(&step) {
            *c += s;
        }
        if crate::linalg::inf_norm(&coef) > 30.0 {
            separation = true;
            break;
        }
    }
    Ok(LogisticFit {
        coef,
        iterations,
        converged,
        separation,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ModelForm {
    /// Cell means keyed by the packed binary design; `fallback` is the
    /// marginal mean, used for unseen cells.
    Saturated {
        cells: BTreeMap<u64, f64>,
        fallback: f64,
    },
    /// Logistic with intercept-first coefficients.
    Logistic { coef: Vec<f64> },
    /// Ordinary least squares with intercept-first coefficients.
    Linear { coef: Vec<f64> },
}

/// A fitted conditional model for one occasion.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CondModel {
    pub time: usize,
    pub design: DesignSpec,
    pub form: ModelForm,
    /// Clamp applied to predictions when the model is a probability.
    pub prob_clamp: Option<f64>,
}

impl CondModel {
    pub fn predict(&self, panel: &Panel, i: usize, ovs: &[Ov]) -> f64 {
        let raw = match &self.form {
            ModelForm::Saturated { cells, fallback } => match self.design.pack(panel, i, ovs) {
                Some(key) => cells.get(&key).copied().unwrap_or(*fallback),
                None => *fallback,
            },
            ModelForm::Logistic { coef } => {
                let vals = self.design.values(panel, i, ovs);
                let eta =
                    coef[0] + vals.iter().zip(&coef[1..]).map(|(x, b)| x * b).sum::<f64>();
                expit(eta)
            }
            ModelForm::Linear { coef } => {
                let vals = self.design.values(panel, i, ovs);
                coef[0] + vals.iter().zip(&coef[1..]).map(|(x, b)| x * b).sum::<f64>()
            }
        };
        match self.prob_clamp {
            Some(c) => raw.clamp(c, 1.0 - c),
            None => raw,
        }
    }
}

/// Fit a scalar conditional mean on the given design. Binary designs get a
/// saturated cell-mean fit; cells outside the observed support merge into
/// the marginal mean (queries only ever come from observed histories, so a
/// merged cell means an explicit override walked off support). Non-binary
/// designs use a logistic or linear working model.
#[allow(clippy::too_many_arguments)]
fn fit_conditional(
    panel: &Panel,
    time: usize,
    design: DesignSpec,
    response: impl Fn(usize) -> f64,
    subset: Option<&[usize]>,
    probability: bool,
    prob_clamp: Option<f64>,
    cfg: &NuisanceConfig,
    warnings: &mut Vec<String>,
) -> Result<CondModel> {
    let indices: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..panel.n()).collect(),
    };

    if design.is_binary(panel) && design.len() <= 20 {
        let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        let mut total = 0.0;
        for &i in &indices {
            let key = design.pack(panel, i, &[]).expect("binary design packs");
            let e = sums.entry(key).or_insert((0.0, 0));
            e.0 += response(i);
            e.1 += 1;
            total += response(i);
        }
        let fallback = if indices.is_empty() {
            0.5
        } else {
            total / indices.len() as f64
        };
        let complete = sums.len() == (1usize << design.len());
        if !complete {
            warnings.push(format!(
                "time {time}: empty stratum in saturated fit: {} of {} cells unobserved, merged into the marginal mean",
                (1usize << design.len()) - sums.len(),
                1usize << design.len()
            ));
        }
        let cells = sums
            .into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect();
        return Ok(CondModel {
            time,
            design,
            form: ModelForm::Saturated { cells, fallback },
            prob_clamp,
        });
    }

    let rows: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| design.values(panel, i, &[]))
        .collect();
    let ys: Vec<f64> = indices.iter().map(|&i| response(i)).collect();
    if probability {
        let fit = fit_logistic(&rows, &ys, None)?;
        if fit.separation {
            warnings.push(format!("time {time}: separation in logistic fit"));
        }
        Ok(CondModel {
            time,
            design,
            form: ModelForm::Logistic { coef: fit.coef },
            prob_clamp,
        })
    } else {
        let with_icept: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect())
            .collect();
        let w = vec![1.0; ys.len()];
        let coef = crate::linalg::weighted_least_squares(&with_icept, &ys, &w, cfg.ridge)?;
        Ok(CondModel {
            time,
            design,
            form: ModelForm::Linear { coef },
            prob_clamp,
        })
    }
}

/// Per-arm treatment means at one occasion; the arm contrast is the fitted
/// instrument effect, floored away from zero to bound the signed weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TreatmentArms {
    pub m0: CondModel,
    pub m1: CondModel,
    pub delta_floor: f64,
}

impl TreatmentArms {
    /// Arm-0 mean `E(A(j) | design, Z(j)=0)`.
    pub fn arm0(&self, panel: &Panel, i: usize, ovs: &[Ov]) -> f64 {
        self.m0.predict(panel, i, ovs)
    }

    /// Fitted contrast `delta_hat_j`, floored; the bool reports flooring.
    pub fn delta(&self, panel: &Panel, i: usize, ovs: &[Ov]) -> (f64, bool) {
        let d = self.m1.predict(panel, i, ovs) - self.m0.predict(panel, i, ovs);
        if d.abs() >= self.delta_floor {
            (d, false)
        } else if d < 0.0 {
            (-self.delta_floor, true)
        } else {
            (self.delta_floor, true)
        }
    }

    /// `E(A(j) | design, Z(j)=z) = m0 + z * delta_hat`, clamped to [0,1].
    pub fn mean_a(&self, panel: &Panel, i: usize, z: u8, ovs: &[Ov]) -> f64 {
        let (d, _) = self.delta(panel, i, ovs);
        (self.arm0(panel, i, ovs) + f64::from(z) * d).clamp(0.0, 1.0)
    }
}

/// Reference treatment density `f*(A(k) | V, A(k-1))`, strictly positive.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum RefDensity {
    Uniform,
    Fitted(Vec<CondModel>),
    Table(Vec<HistTable>),
}

impl RefDensity {
    /// `f*(A(k) = a | V_i, A_i(k-1))` with optional treatment overrides.
    pub fn prob(&self, panel: &Panel, i: usize, k: usize, a: u8, ovs: &[Ov]) -> f64 {
        let p1 = match self {
            RefDensity::Uniform => 0.5,
            RefDensity::Fitted(models) => models[k].predict(panel, i, ovs),
            RefDensity::Table(tables) => tables[k].eval(&|v| match v.kind {
                crate::dgp::VarKind::L => {
                    let val = panel.v(i)[0];
                    debug_assert!(val == 0.0 || val == 1.0);
                    val as u8
                }
                crate::dgp::VarKind::A => {
                    let mut bit = panel.a(i, v.time);
                    for ov in ovs {
                        if let Ov::A(t, val) = ov {
                            if *t == v.time {
                                bit = *val;
                            }
                        }
                    }
                    bit
                }
                _ => panic!("reference table conditions on {v}"),
            }),
        };
        if a == 1 {
            p1
        } else {
            1.0 - p1
        }
    }
}

/// Set the reference density. `Fitted` regresses `A(k)` on `(V, A(k-1))`;
/// `Table` entries are validated strictly positive on both arms for every
/// observed `(V, A(k-1))` combination.
pub fn set_reference_density(
    panel: &Panel,
    mode: &FStarMode,
    cfg: &NuisanceConfig,
    warnings: &mut Vec<String>,
) -> Result<RefDensity> {
    match mode {
        FStarMode::Uniform => Ok(RefDensity::Uniform),
        FStarMode::Fitted => {
            let mut models = Vec::with_capacity(panel.occasions());
            for k in 0..panel.occasions() {
                let design = DesignSpec::reference(k, panel.v_cols());
                let model = fit_conditional(
                    panel,
                    k,
                    design,
                    |i| f64::from(panel.a(i, k)),
                    None,
                    true,
                    Some(cfg.prob_clamp),
                    cfg,
                    warnings,
                )?;
                models.push(model);
            }
            Ok(RefDensity::Fitted(models))
        }
        FStarMode::Table { tables } => {
            if tables.len() != panel.occasions() {
                return Err(Error::Config(format!(
                    "reference table count {} != occasions {}",
                    tables.len(),
                    panel.occasions()
                )));
            }
            let density = RefDensity::Table(tables.clone());
            for i in 0..panel.n() {
                for k in 0..panel.occasions() {
                    for a in [0u8, 1] {
                        let p = density.prob(panel, i, k, a, &[]);
                        if p <= 0.0 {
                            return Err(Error::Positivity(format!(
                                "reference density gives mass {p} to A({k})={a} for subject {}",
                                panel.id(i)
                            )));
                        }
                    }
                }
            }
            Ok(density)
        }
    }
}

/// Everything the estimators need from the data besides the outcome model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NuisanceSet {
    pub occasions: usize,
    /// `f(Z(j)=1 | L(0..j), A(0..j-1), Z(0..j-1))` per occasion.
    pub f_z: Vec<CondModel>,
    /// Treatment arms fitted on the delta-flag design: the contrast enters
    /// the signed weights, the Psi recursion denominators, and the
    /// instrument coefficient of the fitted treatment mean.
    pub treat_w: Vec<TreatmentArms>,
    /// Arm-zero mean `E(A(j) | ., Z(j)=0)` on the treatment-mean design;
    /// the full mean is `m_a0 + Z(j) * delta_hat`.
    pub m_a0: Vec<CondModel>,
    /// `f(A(j)=1 | L(0..j), A(0..j-1))` for sequential-randomization weights.
    pub f_a_sra: Vec<CondModel>,
    pub f_star: RefDensity,
    pub pattern: MisspecPattern,
    pub config: NuisanceConfig,
    /// Omitted column index for the Psi and C regressions (if flagged).
    pub psi_omit: Option<usize>,
    pub cj_omit: Option<usize>,
    pub warnings: Vec<String>,
}

impl NuisanceSet {
    pub fn fit(
        panel: &Panel,
        pattern: &MisspecPattern,
        fstar: &FStarMode,
        cfg: &NuisanceConfig,
    ) -> Result<NuisanceSet> {
        let omit = pattern.omit_index(panel.l_names())?;
        let omit_for = |flag: Flag| if flag.is_omit() { omit } else { None };
        let mut warnings = Vec::new();
        let j_count = panel.occasions();

        let mut f_z = Vec::with_capacity(j_count);
        for j in 0..j_count {
            let design =
                DesignSpec::instrument(j, panel.l_cols(), omit_for(pattern.instrument_density));
            f_z.push(fit_conditional(
                panel,
                j,
                design,
                |i| f64::from(panel.z(i, j)),
                None,
                true,
                Some(cfg.prob_clamp),
                cfg,
                &mut warnings,
            )?);
        }

        let treat_w = fit_treatment_arms(panel, omit_for(pattern.delta), cfg, &mut warnings)?;
        let m_a0 = if pattern.treatment_mean == pattern.delta {
            treat_w.iter().map(|arms| arms.m0.clone()).collect()
        } else {
            let mut out = Vec::with_capacity(j_count);
            for j in 0..j_count {
                let design =
                    DesignSpec::treatment(j, panel.l_cols(), omit_for(pattern.treatment_mean));
                let arm0: Vec<usize> = (0..panel.n()).filter(|&i| panel.z(i, j) == 0).collect();
                out.push(fit_conditional(
                    panel,
                    j,
                    design,
                    |i| f64::from(panel.a(i, j)),
                    Some(&arm0),
                    true,
                    None,
                    cfg,
                    &mut warnings,
                )?);
            }
            out
        };

        let mut f_a_sra = Vec::with_capacity(j_count);
        for j in 0..j_count {
            let design =
                DesignSpec::sra_treatment(j, panel.l_cols(), omit_for(pattern.sra_treatment));
            f_a_sra.push(fit_conditional(
                panel,
                j,
                design,
                |i| f64::from(panel.a(i, j)),
                None,
                true,
                Some(cfg.prob_clamp),
                cfg,
                &mut warnings,
            )?);
        }

        let f_star = set_reference_density(panel, fstar, cfg, &mut warnings)?;
        // A marginalized reference density only differs in fitted mode.
        let f_star = match (&f_star, pattern.reference_density) {
            (RefDensity::Fitted(_), Flag::OmitCovariate) => {
                let mut models = Vec::with_capacity(j_count);
                for k in 0..j_count {
                    let design = DesignSpec {
                        l_terms: Vec::new(),
                        z_times: Vec::new(),
                        a_times: (0..k).collect(),
                    };
                    models.push(fit_conditional(
                        panel,
                        k,
                        design,
                        |i| f64::from(panel.a(i, k)),
                        None,
                        true,
                        Some(cfg.prob_clamp),
                        cfg,
                        &mut warnings,
                    )?);
                }
                RefDensity::Fitted(models)
            }
            _ => f_star,
        };

        let psi_omit = if pattern.psi1.is_omit() || pattern.psi0.is_omit() {
            omit
        } else {
            None
        };
        let cj_omit = omit_for(pattern.cj);

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
            cj_omit,
            warnings,
        })
    }

    /// `f(Z(j) = z | history)` at subject `i`'s observed history.
    pub fn f_z_at(&self, panel: &Panel, i: usize, j: usize, z: u8) -> f64 {
        let p1 = self.f_z[j].predict(panel, i, &[]);
        if z == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    /// Fitted treatment mean `E(A(j) | A(j-1), L(j), Z(j))`, built as
    /// `m_a0 + Z(j) * delta_hat` and clamped to [0,1].
    pub fn mean_a(&self, panel: &Panel, i: usize, j: usize) -> f64 {
        let (d, _) = self.treat_w[j].delta(panel, i, &[]);
        let m0 = self.m_a0[j].predict(panel, i, &[]);
        (m0 + f64::from(panel.z(i, j)) * d).clamp(0.0, 1.0)
    }

    /// Content hash over the fitted models, for provenance fields.
    pub fn fingerprint(&self) -> String {
        fingerprint(&(
            &self.f_z,
            &self.treat_w,
            &self.m_a0,
            &self.f_a_sra,
            &self.f_star,
        ))
    }
}

fn fit_treatment_arms(
    panel: &Panel,
    omit: Option<usize>,
    cfg: &NuisanceConfig,
    warnings: &mut Vec<String>,
) -> Result<Vec<TreatmentArms>> {
    let j_count = panel.occasions();
    let mut out = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let design = DesignSpec::treatment(j, panel.l_cols(), omit);
        let arm0: Vec<usize> = (0..panel.n()).filter(|&i| panel.z(i, j) == 0).collect();
        let arm1: Vec<usize> = (0..panel.n()).filter(|&i| panel.z(i, j) == 1).collect();
        if arm0.is_empty() || arm1.is_empty() {
            return Err(Error::Relevance(format!(
                "instrument arm empty at occasion {j}"
            )));
        }
        // Arm means are not clamped: the exact 0/1 cells of a perfect
        // compliance panel must survive so the weight collapse is exact.
        // The contrast has its own floor and the combined mean is clamped
        // to [0,1] in `mean_a`.
        let m0 = fit_conditional(
            panel,
            j,
            design.clone(),
            |i| f64::from(panel.a(i, j)),
            Some(&arm0),
            true,
            None,
            cfg,
            warnings,
        )?;
        let m1 = fit_conditional(
            panel,
            j,
            design,
            |i| f64::from(panel.a(i, j)),
            Some(&arm1),
            true,
            None,
            cfg,
            warnings,
        )?;
        out.push(TreatmentArms {
            m0,
            m1,
            delta_floor: cfg.delta_floor,
        });
    }
    // Relevance: the fitted contrast must clear the floor somewhere.
    let relevant = (0..j_count).any(|j| {
        (0..panel.n()).any(|i| {
            let d = out[j].m1.predict(panel, i, &[]) - out[j].m0.predict(panel, i, &[]);
            d.abs() > cfg.delta_floor
        })
    });
    if !relevant {
        return Err(Error::Relevance(
            "fitted instrument effect is below the floor everywhere".into(),
        ));
    }
    Ok(out)
}

/// Regression of a vector pseudo-outcome on a history design: saturated
/// cell means when the design is binary, otherwise per-coordinate OLS.
/// Saturated cells live in a dense table indexed by the packed key; this
/// type sits on the hot path of the sequential recursions and never
/// allocates per prediction.
#[derive(Debug, Clone)]
pub struct VectorFit {
    pub design: DesignSpec,
    dim: usize,
    /// Dense `2^k x dim` cell means, row per packed key; empty rows hold
    /// the fallback.
    cells: Option<Vec<f64>>,
    fallback: Vec<f64>,
    /// Per output coordinate, intercept-first OLS coefficients.
    linear: Option<Vec<Vec<f64>>>,
}

impl VectorFit {
    pub fn fit(
        panel: &Panel,
        design: DesignSpec,
        targets: &[Vec<f64>],
        ridge: f64,
    ) -> Result<VectorFit> {
        let n = panel.n();
        let dim = targets.first().map_or(0, Vec::len);
        let mut fallback = vec![0.0; dim];
        for t in targets {
            for (f, v) in fallback.iter_mut().zip(t) {
                *f += v;
            }
        }
        for f in &mut fallback {
            *f /= n.max(1) as f64;
        }

        if design.is_binary(panel) && design.len() <= 16 {
            let n_cells = 1usize << design.len();
            let mut sums = vec![0.0; n_cells * dim];
            let mut counts = vec![0usize; n_cells];
            for i in 0..n {
                let key = design.pack(panel, i, &[]).expect("binary design packs") as usize;
                counts[key] += 1;
                for (s, v) in sums[key * dim..(key + 1) * dim].iter_mut().zip(&targets[i]) {
                    *s += v;
                }
            }
            for key in 0..n_cells {
                if counts[key] > 0 {
                    let c = counts[key] as f64;
                    for s in &mut sums[key * dim..(key + 1) * dim] {
                        *s /= c;
                    }
                } else {
                    sums[key * dim..(key + 1) * dim].copy_from_slice(&fallback);
                }
            }
            return Ok(VectorFit {
                design,
                dim,
                cells: Some(sums),
                fallback,
                linear: None,
            });
        }

        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                std::iter::once(1.0)
                    .chain(design.values(panel, i, &[]))
                    .collect()
            })
            .collect();
        let w = vec![1.0; n];
        let mut linear = Vec::with_capacity(dim);
        for d in 0..dim {
            let ys: Vec<f64> = targets.iter().map(|t| t[d]).collect();
            linear.push(crate::linalg::weighted_least_squares(&rows, &ys, &w, ridge)?);
        }
        Ok(VectorFit {
            design,
            dim,
            cells: None,
            fallback,
            linear: Some(linear),
        })
    }

    /// Saturated fit from precomputed packed keys (binary design).
    pub fn fit_from_keys(
        design: DesignSpec,
        keys: &[u64],
        targets: &[Vec<f64>],
    ) -> VectorFit {
        let n = keys.len();
        let dim = targets.first().map_or(0, Vec::len);
        let mut fallback = vec![0.0; dim];
        for t in targets {
            for (f, v) in fallback.iter_mut().zip(t) {
                *f += v;
            }
        }
        for f in &mut fallback {
            *f /= n.max(1) as f64;
        }
        let n_cells = 1usize << design.len();
        let mut sums = vec![0.0; n_cells * dim];
        let mut counts = vec![0usize; n_cells];
        for (i, &key) in keys.iter().enumerate() {
            let key = key as usize;
            counts[key] += 1;
            for (s, v) in sums[key * dim..(key + 1) * dim].iter_mut().zip(&targets[i]) {
                *s += v;
            }
        }
        for key in 0..n_cells {
            if counts[key] > 0 {
                let c = counts[key] as f64;
                for s in &mut sums[key * dim..(key + 1) * dim] {
                    *s /= c;
                }
            } else {
                sums[key * dim..(key + 1) * dim].copy_from_slice(&fallback);
            }
        }
        VectorFit {
            design,
            dim,
            cells: Some(sums),
            fallback,
            linear: None,
        }
    }

    /// Dense lookup by precomputed key (saturated fits only).
    #[inline]
    pub fn lookup_into(&self, key: u64, out: &mut [f64]) {
        let cells = self.cells.as_ref().expect("saturated fit");
        let key = key as usize;
        out.copy_from_slice(&cells[key * self.dim..(key + 1) * self.dim]);
    }

    /// Write the prediction into `out` (length `dim`).
    pub fn predict_into(&self, panel: &Panel, i: usize, ovs: &[Ov], out: &mut [f64]) {
        if let Some(cells) = &self.cells {
            match self.design.pack(panel, i, ovs) {
                Some(key) => {
                    let key = key as usize;
                    out.copy_from_slice(&cells[key * self.dim..(key + 1) * self.dim]);
                }
                None => out.copy_from_slice(&self.fallback),
            }
            return;
        }
        let vals = self.design.values(panel, i, ovs);
        let linear = self.linear.as_ref().expect("fit has a form");
        for d in 0..self.dim {
            let coef = &linear[d];
            out[d] = coef[0] + vals.iter().zip(&coef[1..]).map(|(x, b)| x * b).sum::<f64>();
        }
    }

    pub fn predict(&self, panel: &Panel, i: usize, ovs: &[Ov]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.predict_into(panel, i, ovs, &mut out);
        out
    }
}

/// The backward sequential regressions behind the multiply robust
/// estimating function, with all per-subject evaluations stored flat
/// (occasion-major, then subject, then coordinate).
///
/// `gamma1(j, i)` is the instrument-arm contrast of the fitted regression
/// (`PsiTilde_j`), `gamma0(j, i)` its value at `Z(j)=0`, and
/// `psi_obs(j, i)` the fit at the observed instrument value.
#[derive(Debug, Clone)]
pub struct PsiStack {
    pub dim: usize,
    n: usize,
    pub models: Vec<VectorFit>,
    gamma1: Vec<f64>,
    gamma0: Vec<f64>,
    psi_obs: Vec<f64>,
    /// Number of subject-occasion pairs whose delta hit the floor.
    pub floor_events: usize,
}

impl PsiStack {
    #[inline]
    fn slot(&self, j: usize, i: usize) -> std::ops::Range<usize> {
        let base = (j * self.n + i) * self.dim;
        base..base + self.dim
    }

    #[inline]
    pub fn gamma1(&self, j: usize, i: usize) -> &[f64] {
        &self.gamma1[self.slot(j, i)]
    }

    #[inline]
    pub fn gamma0(&self, j: usize, i: usize) -> &[f64] {
        &self.gamma0[self.slot(j, i)]
    }

    #[inline]
    pub fn psi_obs(&self, j: usize, i: usize) -> &[f64] {
        &self.psi_obs[self.slot(j, i)]
    }
}

/// Per-fit cache of the beta-independent inputs to the Psi recursion:
/// the pseudo-outcome scale `(-1)^(1-A(j)) f*(A(j)|.) / delta_hat_j` per
/// subject and occasion, and the count of floored contrasts.
#[derive(Debug, Clone)]
pub struct PsiCache {
    occasions: usize,
    scale: Vec<f64>,
    pub floor_events: usize,
    designs: Vec<DesignSpec>,
    /// Per level: packed keys at the observed history and at both
    /// instrument overrides; `None` when the design is not binary.
    keys: Vec<Option<PsiKeys>>,
}

#[derive(Debug, Clone)]
struct PsiKeys {
    obs: Vec<u64>,
    z1: Vec<u64>,
    z0: Vec<u64>,
}

impl PsiCache {
    pub fn build(panel: &Panel, nuis: &NuisanceSet) -> PsiCache {
        let n = panel.n();
        let j_count = panel.occasions();
        let mut scale = vec![0.0; n * j_count];
        let mut floor_events = 0usize;
        for i in 0..n {
            for j in 0..j_count {
                let a = panel.a(i, j);
                let sign = if a == 1 { 1.0 } else { -1.0 };
                let fs = nuis.f_star.prob(panel, i, j, a, &[]);
                let (delta, floored) = nuis.treat_w[j].delta(panel, i, &[]);
                if floored {
                    floor_events += 1;
                }
                scale[i * j_count + j] = sign * fs / delta;
            }
        }
        let designs: Vec<DesignSpec> = (0..j_count)
            .map(|j| DesignSpec::psi(j, panel.l_cols(), nuis.psi_omit))
            .collect();
        let keys = designs
            .iter()
            .enumerate()
            .map(|(j, design)| {
                if design.len() > 16 {
                    return None;
                }
                let mut obs = Vec::with_capacity(n);
                let mut z1 = Vec::with_capacity(n);
                let mut z0 = Vec::with_capacity(n);
                for i in 0..n {
                    let o = design.pack(panel, i, &[])?;
                    obs.push(o);
                    z1.push(design.pack(panel, i, &[Ov::Z(j, 1)])?);
                    z0.push(design.pack(panel, i, &[Ov::Z(j, 0)])?);
                }
                Some(PsiKeys { obs, z1, z0 })
            })
            .collect();
        PsiCache {
            occasions: j_count,
            scale,
            floor_events,
            designs,
            keys,
        }
    }

    #[inline]
    fn scale_at(&self, i: usize, j: usize) -> f64 {
        self.scale[i * self.occasions + j]
    }
}

/// Run the backward Psi recursion. `source` is the per-subject estimating
/// function at the final occasion (`D_sm` at the current beta, or the
/// regime-indicator residual vector for the efficient estimator).
///
/// At `j = J-1` the pseudo-outcome is
/// `source * (-1)^(1-A(J-1)) * f*(A(J-1)|V,A(J-2)) / delta_hat_{J-1}`,
/// regressed on `(A(J-2), L(J-1), Z(J-1))`; lower levels regress the
/// instrument-arm contrast of the level above in the same way.
pub fn fit_psi_recursion(
    panel: &Panel,
    nuis: &NuisanceSet,
    source: &[Vec<f64>],
) -> Result<PsiStack> {
    let cache = PsiCache::build(panel, nuis);
    fit_psi_recursion_cached(panel, nuis, &cache, source)
}

/// The recursion with precomputed beta-independent inputs; used by the
/// estimators, which evaluate the same recursion at many beta values.
pub fn fit_psi_recursion_cached(
    panel: &Panel,
    nuis: &NuisanceSet,
    cache: &PsiCache,
    source: &[Vec<f64>],
) -> Result<PsiStack> {
    let n = panel.n();
    let j_count = panel.occasions();
    let dim = source.first().map_or(0, Vec::len);
    let mut models: Vec<Option<VectorFit>> = (0..j_count).map(|_| None).collect();
    let mut gamma1 = vec![0.0; j_count * n * dim];
    let mut gamma0 = vec![0.0; j_count * n * dim];
    let mut psi_obs = vec![0.0; j_count * n * dim];

    // `upstream` holds the contrast of the level above, flat n x dim.
    let mut upstream = vec![0.0; n * dim];
    for (i, s) in source.iter().enumerate() {
        upstream[i * dim..(i + 1) * dim].copy_from_slice(s);
    }
    let mut pseudo = vec![vec![0.0; dim]; n];
    let mut at1 = vec![0.0; dim];
    let mut at0 = vec![0.0; dim];
    for j in (0..j_count).rev() {
        for (i, row) in pseudo.iter_mut().enumerate() {
            let scale = cache.scale_at(i, j);
            for (out, v) in row.iter_mut().zip(&upstream[i * dim..(i + 1) * dim]) {
                *out = scale * v;
            }
        }
        let fit = match &cache.keys[j] {
            Some(keys) => VectorFit::fit_from_keys(cache.designs[j].clone(), &keys.obs, &pseudo),
            None => VectorFit::fit(panel, cache.designs[j].clone(), &pseudo, nuis.config.ridge)?,
        };
        match &cache.keys[j] {
            Some(keys) => {
                for i in 0..n {
                    fit.lookup_into(keys.z1[i], &mut at1);
                    fit.lookup_into(keys.z0[i], &mut at0);
                    let base = (j * n + i) * dim;
                    for d in 0..dim {
                        gamma1[base + d] = at1[d] - at0[d];
                        gamma0[base + d] = at0[d];
                        upstream[i * dim + d] = at1[d] - at0[d];
                    }
                    fit.lookup_into(keys.obs[i], &mut psi_obs[base..base + dim]);
                }
            }
            None => {
                for i in 0..n {
                    fit.predict_into(panel, i, &[Ov::Z(j, 1)], &mut at1);
                    fit.predict_into(panel, i, &[Ov::Z(j, 0)], &mut at0);
                    let base = (j * n + i) * dim;
                    for d in 0..dim {
                        gamma1[base + d] = at1[d] - at0[d];
                        gamma0[base + d] = at0[d];
                        upstream[i * dim + d] = at1[d] - at0[d];
                    }
                    fit.predict_into(panel, i, &[], &mut psi_obs[base..base + dim]);
                }
            }
        }
        models[j] = Some(fit);
    }

    Ok(PsiStack {
        dim,
        n,
        models: models.into_iter().map(Option::unwrap).collect(),
        gamma1,
        gamma0,
        psi_obs,
        floor_events: cache.floor_events,
    })
}

/// The backward C recursion for the doubly robust estimator under
/// sequential randomization: `R_{J-1}` regresses `D_sm` on
/// `(A(J-1), L(J-1))`; each lower level regresses the reference-density
/// average of the level above evaluated at both treatment arms.
#[derive(Debug, Clone)]
pub struct CjStack {
    pub dim: usize,
    n: usize,
    pub models: Vec<VectorFit>,
    r_obs: Vec<f64>,
    r_arm: [Vec<f64>; 2],
}

impl CjStack {
    #[inline]
    fn slot(&self, j: usize, i: usize) -> std::ops::Range<usize> {
        let base = (j * self.n + i) * self.dim;
        base..base + self.dim
    }

    /// Fitted `R_j` at the observed treatment path.
    #[inline]
    pub fn r_obs(&self, j: usize, i: usize) -> &[f64] {
        &self.r_obs[self.slot(j, i)]
    }

    /// Fitted `R_j` with `A(j)` overridden to `a`.
    #[inline]
    pub fn r_arm(&self, a: u8, j: usize, i: usize) -> &[f64] {
        &self.r_arm[a as usize][self.slot(j, i)]
    }
}

pub fn fit_cj_recursion(panel: &Panel, nuis: &NuisanceSet, dsm: &[Vec<f64>]) -> Result<CjStack> {
    let n = panel.n();
    let j_count = panel.occasions();
    let dim = dsm.first().map_or(0, Vec::len);
    let mut models: Vec<Option<VectorFit>> = (0..j_count).map(|_| None).collect();
    let mut r_obs = vec![0.0; j_count * n * dim];
    let mut r_arm = [vec![0.0; j_count * n * dim], vec![0.0; j_count * n * dim]];

    let mut target: Vec<Vec<f64>> = dsm.to_vec();
    for j in (0..j_count).rev() {
        let design = DesignSpec::c_regression(j, panel.l_cols(), nuis.cj_omit);
        let fit = VectorFit::fit(panel, design, &target, nuis.config.ridge)?;
        for i in 0..n {
            let base = (j * n + i) * dim;
            fit.predict_into(panel, i, &[], &mut r_obs[base..base + dim]);
            fit.predict_into(panel, i, &[Ov::A(j, 0)], &mut r_arm[0][base..base + dim]);
            fit.predict_into(panel, i, &[Ov::A(j, 1)], &mut r_arm[1][base..base + dim]);
        }
        if j > 0 {
            // Pseudo-outcome for the level below:
            // sum_a f*(a | V, A(j-1)) * R_j(a).
            for (i, acc) in target.iter_mut().enumerate() {
                let base = (j * n + i) * dim;
                for a in [0u8, 1] {
                    let fs = nuis.f_star.prob(panel, i, j, a, &[]);
                    for (d, acc_v) in acc.iter_mut().enumerate() {
                        if a == 0 {
                            *acc_v = fs * r_arm[0][base + d];
                        } else {
                            *acc_v += fs * r_arm[1][base + d];
                        }
                    }
                }
            }
        }
        models[j] = Some(fit);
    }

    Ok(CjStack {
        dim,
        n,
        models: models.into_iter().map(Option::unwrap).collect(),
        r_obs,
        r_arm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, DgpSpec};

    #[test]
    fn logistic_intercept_only_balanced_is_zero() {
        let rows: Vec<Vec<f64>> = (0..100).map(|_| Vec::new()).collect();
        let y: Vec<f64> = (0..100).map(|i| f64::from(i % 2 == 0)).collect();
        let fit = fit_logistic(&rows, &y, None).unwrap();
        assert!(fit.converged);
        assert!(fit.coef[0].abs() < 1e-9);
    }

    #[test]
    fn logistic_recovers_known_slope() {
        // Simulate from the logistic law itself with slope 1.
        use rand::Rng;
        let mut rng = crate::util::stream_rng(3, crate::util::domain::DRAW, 0);
        let n = 100_000;
        let mut rows = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.gen_range(-2.0..2.0);
            let p = expit(x);
            rows.push(vec![x]);
            y.push(f64::from(rng.gen::<f64>() < p));
        }
        let fit = fit_logistic(&rows, &y, None).unwrap();
        assert!(fit.converged);
        assert!(fit.coef[0].abs() < 0.03, "intercept {}", fit.coef[0]);
        assert!((fit.coef[1] - 1.0).abs() < 0.03, "slope {}", fit.coef[1]);
    }

    #[test]
    fn logistic_flags_separation_on_constant_response() {
        let rows: Vec<Vec<f64>> = vec![Vec::new(); 20_000];
        let y = vec![1.0; 20_000];
        let fit = fit_logistic(&rows, &y, None).unwrap();
        assert!(fit.separation);
        assert!(fit.coef[0] > 30.0);
    }

    #[test]
    fn perfect_compliance_gives_unit_contrast_and_zero_base() {
        let panel = simulate(&DgpSpec::desk_perfect_compliance(), 3000, 4).unwrap();
        let nuis = NuisanceSet::fit(
            &panel,
            &MisspecPattern::all_correct(),
            &FStarMode::Uniform,
            &NuisanceConfig::default(),
        )
        .unwrap();
        for j in 0..panel.occasions() {
            for i in (0..panel.n()).step_by(101) {
                let (d, floored) = nuis.treat_w[j].delta(&panel, i, &[]);
                assert_eq!(d, 1.0);
                assert!(!floored);
                assert_eq!(nuis.treat_w[j].arm0(&panel, i, &[]), 0.0);
            }
        }
    }

    #[test]
    fn saturated_contrast_tracks_structural_delta() {
        let spec = DgpSpec::desk_default();
        let panel = simulate(&spec, 100_000, 9).unwrap();
        let nuis = NuisanceSet::fit(
            &panel,
            &MisspecPattern::all_correct(),
            &FStarMode::Uniform,
            &NuisanceConfig::default(),
        )
        .unwrap();
        // At occasion 0 the structural effect is 0.4 + 0.1 * l0; a 3-SE
        // band at n = 1e5 is a few hundredths wide.
        for i in (0..panel.n()).step_by(53) {
            let truth = 0.4 + 0.1 * panel.l(i, 0, 0);
            let (d, _) = nuis.treat_w[0].delta(&panel, i, &[]);
            assert!((d - truth).abs() < 0.03, "delta {d} vs {truth}");
        }
    }

    #[test]
    fn misspecified_design_drops_the_named_column() {
        let panel = simulate(&DgpSpec::desk_default(), 2000, 12).unwrap();
        let pattern = MisspecPattern {
            instrument_density: Flag::OmitCovariate,
            omit_column: Some("l".into()),
            ..MisspecPattern::all_correct()
        };
        let nuis = NuisanceSet::fit(
            &panel,
            &pattern,
            &FStarMode::Uniform,
            &NuisanceConfig::default(),
        )
        .unwrap();
        assert!(nuis.f_z[1].design.l_terms.is_empty());
        // The correctly specified parts keep their covariates.
        assert!(!nuis.f_a_sra[1].design.l_terms.is_empty());
    }

    #[test]
    fn missing_omit_column_is_a_config_error() {
        let panel = simulate(&DgpSpec::desk_default(), 200, 12).unwrap();
        let pattern = MisspecPattern {
            delta: Flag::OmitCovariate,
            omit_column: Some("nope".into()),
            ..MisspecPattern::all_correct()
        };
        let err = NuisanceSet::fit(
            &panel,
            &pattern,
            &FStarMode::Uniform,
            &NuisanceConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn uniform_reference_density_is_half_everywhere() {
        let panel = simulate(&DgpSpec::desk_default(), 100, 2).unwrap();
        let mut warnings = Vec::new();
        let f = set_reference_density(
            &panel,
            &FStarMode::Uniform,
            &NuisanceConfig::default(),
            &mut warnings,
        )
        .unwrap();
        // prod_k f* = 0.25 for every regime when J = 2.
        let p = f.prob(&panel, 0, 0, 1, &[]) * f.prob(&panel, 0, 1, 0, &[]);
        assert_eq!(p, 0.25);
    }

    #[test]
    fn fitted_reference_density_near_constant_when_independent() {
        // Treatments independent of (V, A(k-1)) by construction: the fitted
        // reference is then near-constant in its conditioners.
        let mut spec = DgpSpec::desk_default();
        spec.p_z = vec![
            crate::dgp::HistTable::constant(0.5),
            crate::dgp::HistTable::constant(0.5),
        ];
        spec.a_base = vec![
            crate::dgp::HistTable::constant(0.3),
            crate::dgp::HistTable::constant(0.3),
        ];
        spec.a_shift = vec![
            crate::dgp::HistTable::constant(0.2),
            crate::dgp::HistTable::constant(0.2),
        ];
        let panel = simulate(&spec, 50_000, 8).unwrap();
        let mut warnings = Vec::new();
        let f = set_reference_density(
            &panel,
            &FStarMode::Fitted,
            &NuisanceConfig::default(),
            &mut warnings,
        )
        .unwrap();
        let p_a0 = f.prob(&panel, 0, 1, 1, &[Ov::A(0, 0)]);
        let p_a1 = f.prob(&panel, 0, 1, 1, &[Ov::A(0, 1)]);
        assert!((p_a0 - p_a1).abs() < 0.03, "{p_a0} vs {p_a1}");
    }

    #[test]
    fn reference_table_round_trips_and_validates_positivity() {
        let panel = simulate(&DgpSpec::desk_default(), 500, 6).unwrap();
        let tables = vec![HistTable::constant(0.7), HistTable::constant(0.7)];
        let mode = FStarMode::Table { tables };
        let json = serde_json::to_string(&mode).unwrap();
        let back: FStarMode = serde_json::from_str(&json).unwrap();
        assert_eq!(mode, back);
        let mut warnings = Vec::new();
        let f = set_reference_density(&panel, &back, &NuisanceConfig::default(), &mut warnings)
            .unwrap();
        assert_eq!(f.prob(&panel, 3, 1, 1, &[]), 0.7);
        assert!((f.prob(&panel, 3, 1, 0, &[]) - 0.3).abs() < 1e-12);

        let bad = FStarMode::Table {
            tables: vec![HistTable::constant(1.0), HistTable::constant(0.5)],
        };
        let err = set_reference_density(&panel, &bad, &NuisanceConfig::default(), &mut warnings)
            .unwrap_err();
        assert!(matches!(err, Error::Positivity(_)));
    }

    #[test]
    fn treatment_mean_decomposition_is_exact() {
        let panel = simulate(&DgpSpec::desk_default(), 5000, 14).unwrap();
        let nuis = NuisanceSet::fit(
            &panel,
            &MisspecPattern::all_correct(),
            &FStarMode::Uniform,
            &NuisanceConfig::default(),
        )
        .unwrap();
        for j in 0..panel.occasions() {
            for i in (0..panel.n()).step_by(97) {
                let (d, _) = nuis.treat_w[j].delta(&panel, i, &[]);
                let m0 = nuis.m_a0[j].predict(&panel, i, &[]);
                let expect = (m0 + f64::from(panel.z(i, j)) * d).clamp(0.0, 1.0);
                assert_eq!(nuis.mean_a(&panel, i, j), expect);
            }
        }
    }

    #[test]
    fn zero_source_propagates_through_psi_and_cj() {
        let panel = simulate(&DgpSpec::desk_default(), 2000, 17).unwrap();
        let nuis = NuisanceSet::fit(
            &panel,
            &MisspecPattern::all_correct(),
            &FStarMode::Uniform,
            &NuisanceConfig::default(),
        )
        .unwrap();
        let zeros = vec![vec![0.0, 0.0]; panel.n()];
        let psi = fit_psi_recursion(&panel, &nuis, &zeros).unwrap();
        let cj = fit_cj_recursion(&panel, &nuis, &zeros).unwrap();
        for j in 0..panel.occasions() {
            for i in (0..panel.n()).step_by(119) {
                assert!(psi.gamma1(j, i).iter().all(|v| v.abs() < 1e-14));
                assert!(psi.gamma0(j, i).iter().all(|v| v.abs() < 1e-14));
                assert!(cj.r_obs(j, i).iter().all(|v| v.abs() < 1e-14));
            }
        }
    }
}
