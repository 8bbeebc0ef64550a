//! Discrete structural data-generating process with a latent binary
//! confounder `U(j)` and a binary instrument `Z(j)` at every occasion.
//!
//! Per occasion the draw order is `U(j), L(j), Z(j), A(j)`, then the
//! terminal outcome `Y = muY(U, L, A) + sigma_y * noise`. The conditioning
//! sets are typed so the identification assumptions hold by construction:
//!
//! * `p_z` takes no `U` argument (instrument independence),
//! * `p_l`, `p_u` and `mu_y` take no `Z` argument (exclusion restriction),
//! * the additive instrument effect `a_shift` (delta) takes no `U` argument
//!   (independent compliance type), while the base rate `a_base` may,
//! * `p_z` is strictly inside (0,1) (instrument positivity),
//! * `a_shift` is nonzero somewhere (instrument relevance).
//!
//! `a_raw`, when present, bypasses the base+shift decomposition with a raw
//! treatment table that may depend on `U` within each instrument arm; it
//! exists so tests can construct laws that *violate* the compliance-type
//! assumption and watch the identity checks fail.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::Error as _;

use crate::error::ValidationReport;
use crate::panel::Panel;
use crate::util::{domain, stream_rng};
use crate::{Error, Result};

/// Largest occasion count for exact enumeration (state space `2^(4J)`).
pub const MAX_ENUMERABLE_OCCASIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    U,
    L,
    Z,
    A,
}

/// A time-indexed structural variable. Ordering is chronological with the
/// within-occasion order `U, L, Z, A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    pub time: usize,
    pub kind: VarKind,
}

impl Var {
    pub fn u(time: usize) -> Var {
        Var { time, kind: VarKind::U }
    }
    pub fn l(time: usize) -> Var {
        Var { time, kind: VarKind::L }
    }
    pub fn z(time: usize) -> Var {
        Var { time, kind: VarKind::Z }
    }
    pub fn a(time: usize) -> Var {
        Var { time, kind: VarKind::A }
    }

    /// Bit position in a full latent path (4 bits per occasion).
    pub fn joint_bit(&self) -> usize {
        4 * self.time
            + match self.kind {
                VarKind::U => 0,
                VarKind::L => 1,
                VarKind::Z => 2,
                VarKind::A => 3,
            }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            VarKind::U => 'u',
            VarKind::L => 'l',
            VarKind::Z => 'z',
            VarKind::A => 'a',
        };
        write!(f, "{}{}", k, self.time)
    }
}

impl FromStr for Var {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Var, String> {
        let (k, t) = s.split_at(1);
        let kind = match k {
            "u" => VarKind::U,
            "l" => VarKind::L,
            "z" => VarKind::Z,
            "a" => VarKind::A,
            other => return Err(format!("unknown variable kind {other:?}")),
        };
        let time = t.parse().map_err(|_| format!("bad time in {s:?}"))?;
        Ok(Var { time, kind })
    }
}

/// A table of real values indexed by a full assignment of its (binary)
/// conditioning variables. Serialized as a map from history strings like
/// `"u0=1,l0=0,a0=1"` to values; a table with no conditioners uses the
/// single key `""`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistTable {
    vars: Vec<Var>,
    values: Vec<f64>,
}

impl HistTable {
    /// Build a table by evaluating `f` on every assignment. `f` receives a
    /// lookup closure mapping each conditioning variable to its bit.
    pub fn build(mut vars: Vec<Var>, f: impl Fn(&dyn Fn(Var) -> u8) -> f64) -> HistTable {
        vars.sort();
        vars.dedup();
        let n = 1usize << vars.len();
        let mut values = Vec::with_capacity(n);
        for idx in 0..n {
            let vars_ref = &vars;
            let lookup = move |v: Var| -> u8 {
                let pos = vars_ref
                    .iter()
                    .position(|w| *w == v)
                    .unwrap_or_else(|| panic!("table does not condition on {v}"));
                ((idx >> pos) & 1) as u8
            };
            values.push(f(&lookup));
        }
        HistTable { vars, values }
    }

    pub fn constant(value: f64) -> HistTable {
        HistTable {
            vars: Vec::new(),
            values: vec![value],
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Evaluate under an assignment of all conditioning variables.
    pub fn eval(&self, assign: &dyn Fn(Var) -> u8) -> f64 {
        let mut idx = 0usize;
        for (pos, v) in self.vars.iter().enumerate() {
            idx |= usize::from(assign(*v)) << pos;
        }
        self.values[idx]
    }

    fn key_for(&self, idx: usize) -> String {
        if self.vars.is_empty() {
            return String::new();
        }
        self.vars
            .iter()
            .enumerate()
            .map(|(pos, v)| format!("{}={}", v, (idx >> pos) & 1))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl serde::Serialize for HistTable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = BTreeMap::new();
        for idx in 0..self.values.len() {
            map.insert(self.key_for(idx), self.values[idx]);
        }
        map.serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for HistTable {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<HistTable, D::Error> {
        let map = BTreeMap::<String, f64>::deserialize(deserializer)?;
        if map.is_empty() {
            return Err(D::Error::custom("empty table"));
        }
        // Infer the conditioning set from the first key, then index every
        // entry against the canonical variable order.
        let parse_key = |key: &str| -> std::result::Result<Vec<(Var, u8)>, D::Error> {
            if key.is_empty() {
                return Ok(Vec::new());
            }
            key.split(',')
                .map(|part| {
                    let (name, val) = part
                        .split_once('=')
                        .ok_or_else(|| D::Error::custom(format!("bad table key part {part:?}")))?;
                    let var = Var::from_str(name.trim()).map_err(D::Error::custom)?;
                    let bit = match val.trim() {
                        "0" => 0,
                        "1" => 1,
                        other => {
                            return Err(D::Error::custom(format!("non-binary value {other:?}")));
                        }
                    };
                    Ok((var, bit))
                })
                .collect()
        };
        let first = parse_key(map.keys().next().unwrap())?;
        let mut vars: Vec<Var> = first.iter().map(|(v, _)| *v).collect();
        vars.sort();
        vars.dedup();
        let expected = 1usize << vars.len();
        if map.len() != expected {
            return Err(D::Error::custom(format!(
                "table has {} entries, expected {expected}",
                map.len()
            )));
        }
        let mut values = vec![f64::NAN; expected];
        for (key, value) in &map {
            let assign = parse_key(key)?;
            if assign.len() != vars.len() {
                return Err(D::Error::custom("inconsistent table keys"));
            }
            let mut idx = 0usize;
            for (var, bit) in assign {
                let pos = vars
                    .iter()
                    .position(|w| *w == var)
                    .ok_or_else(|| D::Error::custom(format!("unexpected variable {var} in key")))?;
                idx |= usize::from(bit) << pos;
            }
            values[idx] = *value;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(D::Error::custom("missing table entries"));
        }
        Ok(HistTable { vars, values })
    }
}

/// Structural law. One binary covariate column per occasion, binary
/// instrument and treatment, Gaussian terminal outcome.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DgpSpec {
    pub occasions: usize,
    /// `P(U(j)=1 | U,L,A history before j)`
    pub p_u: Vec<HistTable>,
    /// `P(L(j)=1 | U(0..j), L(0..j-1), A(0..j-1))`
    pub p_l: Vec<HistTable>,
    /// `P(Z(j)=1 | L(0..j), A(0..j-1), Z(0..j-1))`
    pub p_z: Vec<HistTable>,
    /// `P(A(j)=1 | history, Z(j)=0)`
    pub a_base: Vec<HistTable>,
    /// Additive effect of `Z(j)=1` on the treatment probability.
    pub a_shift: Vec<HistTable>,
    /// Raw per-arm treatment tables overriding base+shift (test backdoor;
    /// may violate the compliance-type assumption).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_raw: Option<Vec<Option<HistTable>>>,
    /// `E(Y | U, L, A)`
    pub mu_y: HistTable,
    pub sigma_y: f64,
}

fn check_vars(
    report: &mut ValidationReport,
    table: &HistTable,
    name: &str,
    j: usize,
    allowed: impl Fn(Var) -> bool,
) {
    for v in table.vars() {
        if !allowed(*v) {
            report.push(format!("{name}[{j}] conditions on {v}, which is not allowed"));
        }
    }
}

impl DgpSpec {
    /// Treatment probability `P(A(j)=1 | history, Z(j)=z)`.
    pub fn a_prob(&self, j: usize, assign: &dyn Fn(Var) -> u8) -> f64 {
        if let Some(raw) = self.a_raw.as_ref().and_then(|r| r[j].as_ref()) {
            return raw.eval(assign);
        }
        let base = self.a_base[j].eval(assign);
        let shift = self.a_shift[j].eval(assign);
        base + f64::from(assign(Var::z(j))) * shift
    }

    pub fn validate(&self) -> Result<()> {
        let mut report = ValidationReport::default();
        let j_count = self.occasions;
        if j_count == 0 {
            report.push("occasions must be at least 1");
        }
        for (name, tables) in [
            ("p_u", &self.p_u),
            ("p_l", &self.p_l),
            ("p_z", &self.p_z),
            ("a_base", &self.a_base),
            ("a_shift", &self.a_shift),
        ] {
            if tables.len() != j_count {
                report.push(format!("{name} has {} tables, expected {j_count}", tables.len()));
            }
        }
        if let Some(raw) = &self.a_raw {
            if raw.len() != j_count {
                report.push(format!("a_raw has {} slots, expected {j_count}", raw.len()));
            }
        }
        if !report.is_ok() {
            return Err(Error::InvalidDgp(report));
        }

        for j in 0..j_count {
            check_vars(&mut report, &self.p_u[j], "p_u", j, |v| {
                v.time < j && v.kind != VarKind::Z
            });
            check_vars(&mut report, &self.p_l[j], "p_l", j, |v| match v.kind {
                VarKind::U => v.time <= j,
                VarKind::L | VarKind::A => v.time < j,
                VarKind::Z => false,
            });
            check_vars(&mut report, &self.p_z[j], "p_z", j, |v| match v.kind {
                VarKind::L => v.time <= j,
                VarKind::Z | VarKind::A => v.time < j,
                VarKind::U => false,
            });
            check_vars(&mut report, &self.a_base[j], "a_base", j, |v| match v.kind {
                VarKind::U | VarKind::L => v.time <= j,
                VarKind::Z | VarKind::A => v.time < j,
            });
            check_vars(&mut report, &self.a_shift[j], "a_shift", j, |v| match v.kind {
                VarKind::L => v.time <= j,
                VarKind::Z | VarKind::A => v.time < j,
                VarKind::U => false,
            });
            if let Some(raw) = self.a_raw.as_ref().and_then(|r| r[j].as_ref()) {
                check_vars(&mut report, raw, "a_raw", j, |v| match v.kind {
                    VarKind::U | VarKind::L | VarKind::Z => v.time <= j,
                    VarKind::A => v.time < j,
                });
            }

            for (pos, v) in self.p_u[j].values().iter().enumerate() {
                if !(0.0..=1.0).contains(v) {
                    report.push(format!("p_u[{j}] entry {pos} = {v} outside [0,1]"));
                }
            }
            for (pos, v) in self.p_l[j].values().iter().enumerate() {
                if !(0.0..=1.0).contains(v) {
                    report.push(format!("p_l[{j}] entry {pos} = {v} outside [0,1]"));
                }
            }
            // Instrument positivity is strict.
            for (pos, v) in self.p_z[j].values().iter().enumerate() {
                if !(v.is_finite() && *v > 0.0 && *v < 1.0) {
                    report.push(format!("p_z[{j}] entry {pos} = {v} not strictly inside (0,1)"));
                }
            }
            if self.a_raw.as_ref().and_then(|r| r[j].as_ref()).is_some() {
                let raw = self.a_raw.as_ref().unwrap()[j].as_ref().unwrap();
                for (pos, v) in raw.values().iter().enumerate() {
                    if !(0.0..=1.0).contains(v) {
                        report.push(format!("a_raw[{j}] entry {pos} = {v} outside [0,1]"));
                    }
                }
            } else {
                // Both treatment arms must be valid probabilities over the
                // union of the base and shift conditioning sets.
                let mut union: Vec<Var> = self.a_base[j]
                    .vars()
                    .iter()
                    .chain(self.a_shift[j].vars())
                    .copied()
                    .collect();
                union.sort();
                union.dedup();
                for idx in 0..(1usize << union.len()) {
                    let union_ref = &union;
                    let lookup = move |v: Var| -> u8 {
                        let pos = union_ref.iter().position(|w| *w == v).unwrap();
                        ((idx >> pos) & 1) as u8
                    };
                    let base = self.a_base[j].eval(&lookup);
                    let both = base + self.a_shift[j].eval(&lookup);
                    if !(0.0..=1.0).contains(&base) {
                        report.push(format!("a_base[{j}] gives P(A=1|Z=0) = {base} outside [0,1]"));
                        break;
                    }
                    if !(0.0..=1.0).contains(&both) {
                        report.push(format!("a_base+a_shift[{j}] gives P(A=1|Z=1) = {both} outside [0,1]"));
                        break;
                    }
                }
            }
        }

        // Instrument relevance: the shift must move the treatment somewhere.
        let relevant = (0..j_count).any(|j| {
            if self.a_raw.as_ref().and_then(|r| r[j].as_ref()).is_some() {
                true
            } else {
                self.a_shift[j].values().iter().any(|v| *v != 0.0)
            }
        });
        if !relevant {
            report.push("a_shift is identically zero: instrument is irrelevant");
        }

        if !self.mu_y.values().iter().all(|v| v.is_finite()) {
            report.push("mu_y has non-finite entries");
        }
        if !(self.sigma_y.is_finite() && self.sigma_y >= 0.0) {
            report.push(format!("sigma_y = {} invalid", self.sigma_y));
        }

        if report.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidDgp(report))
        }
    }
}

/// Tunable levers of the shipped two-occasion desk process. Every default
/// lives here rather than inline in the builders.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DeskConfig {
    /// Coefficient of each U(j) in the outcome mean.
    pub confounding: f64,
    /// Scale of the U coefficients in the treatment base rates.
    pub u_on_treatment: f64,
    /// Scale of the U coefficients in the covariate process.
    pub u_on_covariates: f64,
    /// Instrument effect on treatment: `delta_j = delta_base + delta_slope * L(j)`.
    pub delta_base: f64,
    pub delta_slope: f64,
    pub sigma_y: f64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            confounding: 1.0,
            u_on_treatment: 1.0,
            u_on_covariates: 1.0,
            delta_base: 0.4,
            delta_slope: 0.1,
            sigma_y: 1.0,
        }
    }
}

impl DgpSpec {
    /// Two-occasion desk process: one binary covariate, latent confounder
    /// driving both treatment uptake and the outcome, instrument effect
    /// 0.4/0.5 depending on the current covariate.
    pub fn desk(cfg: &DeskConfig) -> DgpSpec {
        let cu = cfg.u_on_covariates;
        let tu = cfg.u_on_treatment;
        DgpSpec {
            occasions: 2,
            p_u: vec![
                HistTable::constant(0.5),
                HistTable::build(vec![Var::u(0), Var::l(0), Var::a(0)], |h| {
                    0.25 + 0.3 * f64::from(h(Var::u(0))) + 0.1 * f64::from(h(Var::l(0)))
                        + 0.15 * f64::from(h(Var::a(0)))
                }),
            ],
            p_l: vec![
                HistTable::build(vec![Var::u(0)], |h| 0.35 + cu * 0.3 * f64::from(h(Var::u(0)))),
                HistTable::build(vec![Var::u(0), Var::u(1), Var::l(0), Var::a(0)], |h| {
                    0.15 + cu * (0.05 * f64::from(h(Var::u(0))) + 0.25 * f64::from(h(Var::u(1))))
                        + 0.15 * f64::from(h(Var::l(0)))
                        + 0.25 * f64::from(h(Var::a(0)))
                }),
            ],
            p_z: vec![
                HistTable::build(vec![Var::l(0)], |h| 0.35 + 0.25 * f64::from(h(Var::l(0)))),
                HistTable::build(vec![Var::l(0), Var::l(1), Var::z(0), Var::a(0)], |h| {
                    0.25 + 0.05 * f64::from(h(Var::l(0)))
                        + 0.2 * f64::from(h(Var::l(1)))
                        + 0.1 * f64::from(h(Var::z(0)))
                        + 0.1 * f64::from(h(Var::a(0)))
                }),
            ],
            a_base: vec![
                HistTable::build(vec![Var::u(0), Var::l(0)], |h| {
                    0.1 + tu * 0.3 * f64::from(h(Var::u(0))) + 0.05 * f64::from(h(Var::l(0)))
                }),
                HistTable::build(
                    vec![Var::u(0), Var::u(1), Var::l(0), Var::l(1), Var::z(0), Var::a(0)],
                    |h| {
                        0.04 + tu * (0.04 * f64::from(h(Var::u(0))) + 0.28 * f64::from(h(Var::u(1))))
                            + 0.03 * f64::from(h(Var::l(0)))
                            + 0.05 * f64::from(h(Var::l(1)))
                            + 0.03 * f64::from(h(Var::z(0)))
                            + 0.02 * f64::from(h(Var::a(0)))
                    },
                ),
            ],
            a_shift: vec![
                HistTable::build(vec![Var::l(0)], |h| {
                    cfg.delta_base + cfg.delta_slope * f64::from(h(Var::l(0)))
                }),
                HistTable::build(vec![Var::l(1)], |h| {
                    cfg.delta_base + cfg.delta_slope * f64::from(h(Var::l(1)))
                }),
            ],
            a_raw: None,
            mu_y: HistTable::build(
                vec![Var::u(0), Var::u(1), Var::l(0), Var::l(1), Var::a(0), Var::a(1)],
                |h| {
                    cfg.confounding * (f64::from(h(Var::u(0))) + f64::from(h(Var::u(1))))
                        + 0.6 * f64::from(h(Var::l(0)))
                        + 0.8 * f64::from(h(Var::l(1)))
                        + 1.0 * f64::from(h(Var::a(0)))
                        + 1.2 * f64::from(h(Var::a(1)))
                        + 0.5 * f64::from(h(Var::a(0))) * f64::from(h(Var::a(1)))
                },
            ),
            sigma_y: cfg.sigma_y,
        }
    }

    pub fn desk_default() -> DgpSpec {
        DgpSpec::desk(&DeskConfig::default())
    }

    /// Desk process with U removed everywhere: sequential randomization
    /// holds given the recorded covariates.
    pub fn desk_unconfounded() -> DgpSpec {
        DgpSpec::desk(&DeskConfig {
            confounding: 0.0,
            u_on_treatment: 0.0,
            u_on_covariates: 0.0,
            ..DeskConfig::default()
        })
    }

    /// Desk process with `A(j) = Z(j)` forced (base 0, shift 1).
    pub fn desk_perfect_compliance() -> DgpSpec {
        let mut spec = DgpSpec::desk_default();
        spec.a_base = vec![HistTable::constant(0.0), HistTable::constant(0.0)];
        spec.a_shift = vec![HistTable::constant(1.0), HistTable::constant(1.0)];
        spec
    }

    /// Single-occasion version of the desk process.
    pub fn desk_j1(cfg: &DeskConfig) -> DgpSpec {
        DgpSpec {
            occasions: 1,
            p_u: vec![HistTable::constant(0.5)],
            p_l: vec![HistTable::build(vec![Var::u(0)], |h| {
                0.35 + cfg.u_on_covariates * 0.3 * f64::from(h(Var::u(0)))
            })],
            p_z: vec![HistTable::build(vec![Var::l(0)], |h| {
                0.35 + 0.25 * f64::from(h(Var::l(0)))
            })],
            a_base: vec![HistTable::build(vec![Var::u(0), Var::l(0)], |h| {
                0.1 + cfg.u_on_treatment * 0.3 * f64::from(h(Var::u(0)))
                    + 0.05 * f64::from(h(Var::l(0)))
            })],
            a_shift: vec![HistTable::build(vec![Var::l(0)], |h| {
                cfg.delta_base + cfg.delta_slope * f64::from(h(Var::l(0)))
            })],
            a_raw: None,
            mu_y: HistTable::build(vec![Var::u(0), Var::l(0), Var::a(0)], |h| {
                cfg.confounding * f64::from(h(Var::u(0)))
                    + 0.6 * f64::from(h(Var::l(0)))
                    + 1.0 * f64::from(h(Var::a(0)))
            }),
            sigma_y: cfg.sigma_y,
        }
    }

    /// Desk process whose time-0 treatment response to the instrument
    /// depends on U: the compliance-type assumption fails and the
    /// instrument-contrast identity check must catch it.
    pub fn desk_assumption5_violating() -> DgpSpec {
        let mut spec = DgpSpec::desk_default();
        let raw0 = HistTable::build(vec![Var::u(0), Var::l(0), Var::z(0)], |h| {
            let base = 0.1 + 0.25 * f64::from(h(Var::u(0))) + 0.05 * f64::from(h(Var::l(0)));
            let shift = 0.15 + 0.35 * f64::from(h(Var::u(0)));
            base + f64::from(h(Var::z(0))) * shift
        });
        spec.a_raw = Some(vec![Some(raw0), None]);
        spec
    }
}

fn lookup<'a>(u: &'a [u8], l: &'a [u8], z: &'a [u8], a: &'a [u8]) -> impl Fn(Var) -> u8 + 'a {
    move |v: Var| match v.kind {
        VarKind::U => u[v.time],
        VarKind::L => l[v.time],
        VarKind::Z => z[v.time],
        VarKind::A => a[v.time],
    }
}

/// Draw `n` i.i.d. subject trajectories. Per-subject RNG streams are
/// derived from `(seed, subject index)`, so the output is independent of
/// any parallel partitioning of subjects.
pub fn simulate(spec: &DgpSpec, n: usize, seed: u64) -> Result<Panel> {
    spec.validate()?;
    let j_count = spec.occasions;
    let noise = if spec.sigma_y > 0.0 {
        Some(Normal::new(0.0, spec.sigma_y).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let mut ids = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n * (j_count + 1));
    let mut z = Vec::with_capacity(n * j_count);
    let mut a = Vec::with_capacity(n * j_count);
    let mut y = Vec::with_capacity(n);

    let mut u_path = vec![0u8; j_count];
    let mut l_path = vec![0u8; j_count];
    let mut z_path = vec![0u8; j_count];
    let mut a_path = vec![0u8; j_count];

    for i in 0..n {
        let mut rng = stream_rng(seed, domain::SUBJECT, i as u64);
        for j in 0..j_count {
            let pu = spec.p_u[j].eval(&lookup(&u_path, &l_path, &z_path, &a_path));
            u_path[j] = u8::from(rng.gen::<f64>() < pu);
            let pl = spec.p_l[j].eval(&lookup(&u_path, &l_path, &z_path, &a_path));
            l_path[j] = u8::from(rng.gen::<f64>() < pl);
            let pz = spec.p_z[j].eval(&lookup(&u_path, &l_path, &z_path, &a_path));
            z_path[j] = u8::from(rng.gen::<f64>() < pz);
            let pa = spec.a_prob(j, &lookup(&u_path, &l_path, &z_path, &a_path));
            a_path[j] = u8::from(rng.gen::<f64>() < pa);
        }
        let mean = spec.mu_y.eval(&lookup(&u_path, &l_path, &z_path, &a_path));
        let yi = mean + noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));

        ids.push(format!("s{i:07}"));
        for j in 0..j_count {
            l.push(f64::from(l_path[j]));
        }
        l.push(yi); // terminal row L(J) = [Y]
        z.extend(z_path.iter().copied());
        a.extend(a_path.iter().copied());
        y.push(yi);
    }

    Panel::from_parts(
        ids,
        vec!["l".to_string()],
        l,
        z,
        a,
        y,
        j_count,
        Vec::new(),
        0,
    )
}

/// Exact joint law over full latent paths, plus the conditional outcome
/// mean on each path. Paths are indexed by `4J` bits, chronologically,
/// with the within-occasion order `u, l, z, a`.
#[derive(Debug, Clone)]
pub struct JointLaw {
    pub occasions: usize,
    pub prob: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub sigma_y: f64,
}

impl JointLaw {
    pub fn n_paths(&self) -> usize {
        self.prob.len()
    }

    #[inline]
    pub fn bit(path: usize, var: Var) -> u8 {
        ((path >> var.joint_bit()) & 1) as u8
    }

    pub fn total_mass(&self) -> f64 {
        self.prob.iter().sum()
    }
}

/// Enumerate the full joint law of a spec. Errors above the enumeration cap.
pub fn conditional_tables(spec: &DgpSpec) -> Result<JointLaw> {
    spec.validate()?;
    if spec.occasions > MAX_ENUMERABLE_OCCASIONS {
        return Err(Error::Enumeration(format!(
            "state space 2^(4*{}) exceeds the enumeration cap (J <= {MAX_ENUMERABLE_OCCASIONS})",
            spec.occasions
        )));
    }
    let j_count = spec.occasions;
    let n_paths = 1usize << (4 * j_count);
    let mut prob = Vec::with_capacity(n_paths);
    let mut mean_y = Vec::with_capacity(n_paths);
    for path in 0..n_paths {
        let assign = |v: Var| JointLaw::bit(path, v);
        let mut p = 1.0;
        for j in 0..j_count {
            let pu = spec.p_u[j].eval(&assign);
            p *= if assign(Var::u(j)) == 1 { pu } else { 1.0 - pu };
            let pl = spec.p_l[j].eval(&assign);
            p *= if assign(Var::l(j)) == 1 { pl } else { 1.0 - pl };
            let pz = spec.p_z[j].eval(&assign);
            p *= if assign(Var::z(j)) == 1 { pz } else { 1.0 - pz };
            let pa = spec.a_prob(j, &assign);
            p *= if assign(Var::a(j)) == 1 { pa } else { 1.0 - pa };
        }
        prob.push(p);
        mean_y.push(spec.mu_y.eval(&assign));
    }
    Ok(JointLaw {
        occasions: j_count,
        prob,
        mean_y,
        sigma_y: spec.sigma_y,
    })
}
