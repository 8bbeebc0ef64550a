//! Longitudinal panel data: per subject, covariates `L(0..J)`, a binary
//! instrument sequence `Z(0..J-1)`, a binary treatment sequence `A(0..J-1)`
//! and a terminal outcome `Y`.
//!
//! Temporal convention per occasion `j`: `L(j)` precedes `Z(j)` precedes
//! `A(j)`. The outcome is housed in the extra covariate row `L(J)` (column
//! `outcome_col`) and mirrored in `y` for direct access; validation keeps
//! the two equal. For repeated-measures MSMs the outcome series is
//! `Y(m) = L(m)[outcome_col]`, `m = 1..=J`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

/// Rectangular longitudinal panel, immutable after construction.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Panel {
    n: usize,
    occasions: usize,
    l_cols: usize,
    l_names: Vec<String>,
    ids: Vec<String>,
    /// Row-major `[subject][time][col]`, `occasions + 1` rows per subject.
    l: Vec<f64>,
    z: Vec<u8>,
    a: Vec<u8>,
    y: Vec<f64>,
    /// Indices into the covariate columns declaring the baseline vector V.
    v_cols: Vec<usize>,
    outcome_col: usize,
}

impl Panel {
    /// Assemble and validate a panel. `l` holds `occasions + 1` rows per
    /// subject; the final row carries the outcome in `outcome_col`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        ids: Vec<String>,
        l_names: Vec<String>,
        l: Vec<f64>,
        z: Vec<u8>,
        a: Vec<u8>,
        y: Vec<f64>,
        occasions: usize,
        v_cols: Vec<usize>,
        outcome_col: usize,
    ) -> Result<Panel> {
        if occasions == 0 {
            return Err(Error::Panel("need at least one treatment occasion".into()));
        }
        let n = ids.len();
        let l_cols = l_names.len();
        if l_cols == 0 {
            return Err(Error::Panel("need at least one covariate column".into()));
        }
        if l.len() != n * (occasions + 1) * l_cols
            || z.len() != n * occasions
            || a.len() != n * occasions
            || y.len() != n
        {
            return Err(Error::Panel("array sizes do not match n and J".into()));
        }
        if outcome_col >= l_cols {
            return Err(Error::Panel(format!(
                "outcome column {outcome_col} out of range ({l_cols} columns)"
            )));
        }
        for &c in &v_cols {
            if c >= l_cols {
                return Err(Error::Panel(format!("baseline column {c} out of range")));
            }
        }
        let panel = Panel {
            n,
            occasions,
            l_cols,
            l_names,
            ids,
            l,
            z,
            a,
            y,
            v_cols,
            outcome_col,
        };
        panel.validate()?;
        Ok(panel)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            for j in 0..self.occasions {
                if self.z(i, j) > 1 {
                    return Err(Error::Panel(format!(
                        "subject {}: Z({}) = {} is not binary",
                        self.ids[i],
                        j,
                        self.z(i, j)
                    )));
                }
                if self.a(i, j) > 1 {
                    return Err(Error::Panel(format!(
                        "subject {}: A({}) = {} is not binary",
                        self.ids[i],
                        j,
                        self.a(i, j)
                    )));
                }
            }
            if !self.y[i].is_finite() {
                return Err(Error::Panel(format!(
                    "subject {}: outcome is not finite",
                    self.ids[i]
                )));
            }
            for t in 0..=self.occasions {
                for c in 0..self.l_cols {
                    if !self.l(i, t, c).is_finite() {
                        return Err(Error::Panel(format!(
                            "subject {}: L({t}) column {c} is not finite",
                            self.ids[i]
                        )));
                    }
                }
            }
            let housed = self.l(i, self.occasions, self.outcome_col);
            if housed != self.y[i] {
                return Err(Error::Panel(format!(
                    "subject {}: Y = {} but L({})[{}] = {}",
                    self.ids[i], self.y[i], self.occasions, self.outcome_col, housed
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of treatment occasions J.
    pub fn occasions(&self) -> usize {
        self.occasions
    }

    pub fn l_cols(&self) -> usize {
        self.l_cols
    }

    pub fn l_names(&self) -> &[String] {
        &self.l_names
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    #[inline]
    pub fn l(&self, i: usize, t: usize, c: usize) -> f64 {
        self.l[(i * (self.occasions + 1) + t) * self.l_cols + c]
    }

    pub fn l_row(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * (self.occasions + 1) + t) * self.l_cols;
        &self.l[start..start + self.l_cols]
    }

    #[inline]
    pub fn z(&self, i: usize, j: usize) -> u8 {
        self.z[i * self.occasions + j]
    }

    #[inline]
    pub fn a(&self, i: usize, j: usize) -> u8 {
        self.a[i * self.occasions + j]
    }

    pub fn a_seq(&self, i: usize) -> &[u8] {
        &self.a[i * self.occasions..(i + 1) * self.occasions]
    }

    #[inline]
    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    /// Outcome series for repeated-measures models: `Y(m) = L(m)[outcome_col]`.
    pub fn y_at(&self, i: usize, m: usize) -> f64 {
        self.l(i, m, self.outcome_col)
    }

    pub fn v_cols(&self) -> &[usize] {
        &self.v_cols
    }

    pub fn outcome_col(&self) -> usize {
        self.outcome_col
    }

    /// Baseline covariate values V (a declared subset of L(0)).
    pub fn v(&self, i: usize) -> Vec<f64> {
        self.v_cols.iter().map(|&c| self.l(i, 0, c)).collect()
    }

    /// Declare which L(0) columns form the baseline vector.
    pub fn with_v_cols(mut self, v_cols: Vec<usize>) -> Result<Panel> {
        for &c in &v_cols {
            if c >= self.l_cols {
                return Err(Error::Panel(format!("baseline column {c} out of range")));
            }
        }
        self.v_cols = v_cols;
        Ok(self)
    }

    /// New panel containing the given subjects (with repetition allowed);
    /// used by the nonparametric bootstrap.
    pub fn resample(&self, indices: &[usize]) -> Panel {
        let rows = self.occasions + 1;
        let mut l = Vec::with_capacity(indices.len() * rows * self.l_cols);
        let mut z = Vec::with_capacity(indices.len() * self.occasions);
        let mut a = Vec::with_capacity(indices.len() * self.occasions);
        let mut y = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            for t in 0..rows {
                l.extend_from_slice(self.l_row(i, t));
            }
            z.extend_from_slice(&self.z[i * self.occasions..(i + 1) * self.occasions]);
            a.extend_from_slice(&self.a[i * self.occasions..(i + 1) * self.occasions]);
            y.push(self.y[i]);
            ids.push(format!("b{k}"));
        }
        Panel {
            n: indices.len(),
            occasions: self.occasions,
            l_cols: self.l_cols,
            l_names: self.l_names.clone(),
            ids,
            l,
            z,
            a,
            y,
            v_cols: self.v_cols.clone(),
            outcome_col: self.outcome_col,
        }
    }
}

/// A fixed treatment regime: one bit per occasion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Regime(pub Vec<u8>);

impl Regime {
    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Canonical index of a regime in the lexicographic enumeration:
/// `a(0)` is the most significant bit.
pub fn regime_index(bits: &[u8]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
}

/// All `2^J` regimes in lexicographic order; this ordering is the canonical
/// regime index used by the efficient estimator.
pub fn enumerate_regimes(occasions: usize) -> Result<Vec<Regime>> {
    if occasions == 0 || occasions > 16 {
        return Err(Error::Config(format!(
            "occasion count {occasions} outside supported range 1..=16"
        )));
    }
    let count = 1usize << occasions;
    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let bits = (0..occasions)
            .map(|j| ((idx >> (occasions - 1 - j)) & 1) as u8)
            .collect();
        out.push(Regime(bits));
    }
    Ok(out)
}

/// Where the outcome comes from when loading CSV panels.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeSource {
    /// A `Y` column attached at each subject's final occasion row.
    Column(String),
    /// A separate two-column file `subject_id,<name>`.
    File { path: String, column: String },
}

/// Column mapping for the long-format CSV layout
/// `subject_id,time,<L columns...>,Z,A[,Y]`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CsvSchema {
    /// Covariate columns in order; `None` infers every header that is not
    /// `subject_id`, `time`, `Z`, `A` or the outcome column.
    pub l_columns: Option<Vec<String>>,
    /// Baseline columns (must be a subset of the covariate columns).
    pub v_columns: Vec<String>,
    pub outcome: OutcomeSource,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            l_columns: None,
            v_columns: Vec::new(),
            outcome: OutcomeSource::Column("Y".into()),
        }
    }
}

struct RawRow {
    time: usize,
    l: Vec<f64>,
    z: u8,
    a: u8,
    y: Option<f64>,
}

fn parse_bit(raw: &str, subject: &str, column: &str, time: usize) -> Result<u8> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Panel(format!(
            "subject {subject}: {column}({time}) = {other:?} is not binary"
        ))),
    }
}

/// Load a long-format CSV panel. Subjects are sorted by id; every subject
/// must cover times `0..J-1` contiguously with one terminal outcome.
pub fn load_panel(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Panel> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Panel(format!("missing column {name:?}")))
    };
    let id_c = col("subject_id")?;
    let time_c = col("time")?;
    let z_c = col("Z")?;
    let a_c = col("A")?;
    let y_col_name = match &schema.outcome {
        OutcomeSource::Column(name) => Some(name.clone()),
        OutcomeSource::File { .. } => None,
    };
    let y_c = match &y_col_name {
        Some(name) => Some(col(name)?),
        None => None,
    };

    let l_names: Vec<String> = match &schema.l_columns {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, h)| {
                *i != id_c && *i != time_c && *i != z_c && *i != a_c && Some(h.as_str()) != y_col_name.as_deref()
            })
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if l_names.is_empty() {
        return Err(Error::Panel("no covariate columns found".into()));
    }
    let l_idx: Vec<usize> = l_names.iter().map(|n| col(n)).collect::<Result<_>>()?;

    let mut by_subject: BTreeMap<String, Vec<RawRow>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record
            .get(id_c)
            .ok_or_else(|| Error::Panel("short record".into()))?
            .to_string();
        let time: usize = record
            .get(time_c)
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| Error::Panel(format!("subject {id}: unparsable time")))?;
        let mut l = Vec::with_capacity(l_idx.len());
        for (&ci, name) in l_idx.iter().zip(&l_names) {
            let v: f64 = record
                .get(ci)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Panel(format!("subject {id}: unparsable {name} at time {time}")))?;
            l.push(v);
        }
        let z = parse_bit(record.get(z_c).unwrap_or(""), &id, "Z", time)?;
        let a = parse_bit(record.get(a_c).unwrap_or(""), &id, "A", time)?;
        let y = match y_c {
            Some(ci) => {
                let raw = record.get(ci).unwrap_or("").trim();
                if raw.is_empty() {
                    None
                } else {
                    Some(raw.parse().map_err(|_| {
                        Error::Panel(format!("subject {id}: unparsable outcome at time {time}"))
                    })?)
                }
            }
            None => None,
        };
        by_subject.entry(id).or_default().push(RawRow { time, l, z, a, y });
    }

    let mut outcomes: BTreeMap<String, f64> = BTreeMap::new();
    if let OutcomeSource::File { path: ypath, column } = &schema.outcome {
        let mut yreader = csv::Reader::from_path(ypath)?;
        let yheaders: Vec<String> = yreader.headers()?.iter().map(str::to_string).collect();
        let yid = yheaders
            .iter()
            .position(|h| h == "subject_id")
            .ok_or_else(|| Error::Panel("outcome file missing subject_id".into()))?;
        let yc = yheaders
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| Error::Panel(format!("outcome file missing column {column:?}")))?;
        for record in yreader.records() {
            let record = record?;
            let id = record.get(yid).unwrap_or("").to_string();
            let y: f64 = record
                .get(yc)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Panel(format!("subject {id}: unparsable outcome")))?;
            outcomes.insert(id, y);
        }
    }

    // Establish J from the first subject, then enforce it everywhere.
    let occasions = by_subject
        .values()
        .next()
        .map(|rows| rows.iter().map(|r| r.time).max().unwrap_or(0) + 1)
        .unwrap_or(0);
    if occasions == 0 && !by_subject.is_empty() {
        return Err(Error::Panel("empty subject record".into()));
    }

    let n = by_subject.len();
    let l_cols = l_names.len();
    let mut ids = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n * (occasions + 1) * l_cols);
    let mut z = Vec::with_capacity(n * occasions);
    let mut a = Vec::with_capacity(n * occasions);
    let mut y = Vec::with_capacity(n);

    for (id, mut rows) in by_subject {
        rows.sort_by_key(|r| r.time);
        let times: Vec<usize> = rows.iter().map(|r| r.time).collect();
        let expected: Vec<usize> = (0..occasions).collect();
        if times != expected {
            for t in 0..occasions {
                if !times.contains(&t) {
                    return Err(Error::Panel(format!("subject {id}: missing time {t}")));
                }
            }
            return Err(Error::Panel(format!(
                "subject {id}: occasions {times:?} do not match 0..{}",
                occasions - 1
            )));
        }
        let mut subject_y: Option<f64> = outcomes.get(&id).copied();
        for row in &rows {
            l.extend_from_slice(&row.l);
            z.push(row.z);
            a.push(row.a);
            if let Some(vy) = row.y {
                if row.time + 1 == occasions {
                    subject_y = Some(vy);
                } else {
                    return Err(Error::Panel(format!(
                        "subject {id}: outcome given at time {} (expected only at {})",
                        row.time,
                        occasions - 1
                    )));
                }
            }
        }
        let vy = subject_y
            .ok_or_else(|| Error::Panel(format!("subject {id}: no terminal outcome")))?;
        // Terminal covariate row L(J): zeros except the housed outcome.
        let mut terminal = vec![0.0; l_cols];
        terminal[0] = vy;
        l.extend_from_slice(&terminal);
        y.push(vy);
        ids.push(id);
    }

    let v_cols = schema
        .v_columns
        .iter()
        .map(|name| {
            l_names
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| Error::Panel(format!("baseline column {name:?} not a covariate")))
        })
        .collect::<Result<Vec<_>>>()?;

    Panel::from_parts(ids, l_names, l, z, a, y, occasions.max(1), v_cols, 0)
}

/// Write a panel in the long CSV format (`Y` attached at the final
/// occasion). `load_panel(save_panel(p)) == p` up to float formatting.
pub fn save_panel(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    header.extend(panel.l_names().iter().cloned());
    header.push("Z".into());
    header.push("A".into());
    header.push("Y".into());
    writer.write_record(&header)?;
    for i in 0..panel.n() {
        for t in 0..panel.occasions() {
            let mut record = vec![panel.id(i).to_string(), t.to_string()];
            for c in 0..panel.l_cols() {
                record.push(format!("{}", panel.l(i, t, c)));
            }
            record.push(panel.z(i, t).to_string());
            record.push(panel.a(i, t).to_string());
            if t + 1 == panel.occasions() {
                record.push(format!("{}", panel.y(i)));
            } else {
                record.push(String::new());
            }
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}
