//! Long panel data with a per-unit adoption cohort and eligibility flag.
//!
//! Calendar periods are remapped to integer periods `1..=T` at load time
//! (`period = calendar - origin + 1`); the origin is kept in the dataset
//! metadata under `time_origin` so that outputs can be mapped back.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Index of a unit inside [`PanelDataset::units`].
pub type UnitIdx = usize;

/// Adoption cohort of a unit: the first period its group is exposed, or
/// `Never` for groups that are never exposed within the sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CohortLabel {
    Finite(i64),
    Never,
}

impl CohortLabel {
    pub fn finite(self) -> Option<i64> {
        match self {
            CohortLabel::Finite(g) => Some(g),
            CohortLabel::Never => None,
        }
    }

    pub fn is_never(self) -> bool {
        matches!(self, CohortLabel::Never)
    }
}

impl fmt::Display for CohortLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CohortLabel::Finite(g) => write!(f, "{g}"),
            CohortLabel::Never => f.write_str("never"),
        }
    }
}

impl Serialize for CohortLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CohortLabel::Finite(g) => s.serialize_i64(*g),
            CohortLabel::Never => s.serialize_str("never"),
        }
    }
}

impl<'de> Deserialize<'de> for CohortLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(g) => Ok(CohortLabel::Finite(g)),
            Raw::Str(s) if s == "never" => Ok(CohortLabel::Never),
            Raw::Str(s) => s
                .parse::<i64>()
                .map(CohortLabel::Finite)
                .map_err(|_| serde::de::Error::custom(format!("invalid cohort label {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitRecord {
    pub id: String,
    pub cohort: CohortLabel,
    pub eligible: bool,
    /// Observed outcomes keyed by period. The key set is the unit's set of
    /// observed periods.
    pub outcomes: BTreeMap<i64, f64>,
}

impl UnitRecord {
    pub fn new(id: impl Into<String>, cohort: CohortLabel, eligible: bool) -> Self {
        UnitRecord {
            id: id.into(),
            cohort,
            eligible,
            outcomes: BTreeMap::new(),
        }
    }

    pub fn with_outcomes(mut self, outcomes: impl IntoIterator<Item = (i64, f64)>) -> Self {
        self.outcomes.extend(outcomes);
        self
    }

    pub fn observed_times(&self) -> impl Iterator<Item = i64> + '_ {
        self.outcomes.keys().copied()
    }

    pub fn outcome(&self, t: i64) -> Option<f64> {
        self.outcomes.get(&t).copied()
    }

    /// `Y_t - Y_baseline` when both periods are observed.
    pub fn long_difference(&self, t: i64, baseline: i64) -> Option<f64> {
        Some(self.outcome(t)? - self.outcome(baseline)?)
    }
}

/// Immutable long panel.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    units: Vec<UnitRecord>,
    index: HashMap<String, UnitIdx>,
    time_range: (i64, i64),
    metadata: BTreeMap<String, String>,
}

impl PanelDataset {
    pub fn new(
        units: Vec<UnitRecord>,
        time_range: (i64, i64),
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let (t_min, t_max) = time_range;
        if t_min > t_max {
            return Err(Error::Schema(format!(
                "empty time range [{t_min}, {t_max}]"
            )));
        }
        let mut index = HashMap::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.id.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate unit id {}", u.id)));
            }
            if let CohortLabel::Finite(g) = u.cohort {
                if g < t_min || g > t_max {
                    return Err(Error::Schema(format!(
                        "unit {}: cohort {g} outside time range [{t_min}, {t_max}]",
                        u.id
                    )));
                }
            }
            if let Some((&t, _)) = u
                .outcomes
                .iter()
                .find(|(&t, _)| t < t_min || t > t_max)
            {
                return Err(Error::Schema(format!(
                    "unit {}: period {t} outside time range",
                    u.id
                )));
            }
        }
        Ok(PanelDataset {
            units,
            index,
            time_range,
            metadata,
        })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn unit(&self, idx: UnitIdx) -> &UnitRecord {
        &self.units[idx]
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn time_range(&self) -> (i64, i64) {
        self.time_range
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn unit_index(&self, id: &str) -> Result<UnitIdx> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    /// Calendar period corresponding to an internal period index.
    pub fn calendar_time(&self, t: i64) -> i64 {
        let origin = self
            .metadata
            .get("time_origin")
            .and_then(|s| s.parse::<i64>().ok())
            .unwrap_or(1);
        t + origin - 1
    }

    /// Distinct cohort labels present, sorted (finite cohorts first).
    pub fn cohorts(&self) -> Vec<CohortLabel> {
        let mut c: Vec<CohortLabel> = self.units.iter().map(|u| u.cohort).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Distinct finite cohorts, ascending.
    pub fn treated_cohorts(&self) -> Vec<i64> {
        self.cohorts().into_iter().filter_map(CohortLabel::finite).collect()
    }

    /// Units in the `(cohort, eligible)` cell, in dataset order.
    pub fn cell_members(&self, cohort: CohortLabel, eligible: bool) -> Vec<UnitIdx> {
        self.units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.cohort == cohort && u.eligible == eligible)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cell_count(&self, cohort: CohortLabel, eligible: bool) -> usize {
        self.units
            .iter()
            .filter(|u| u.cohort == cohort && u.eligible == eligible)
            .count()
    }
}

/// Column mapping for delimiter-separated panel input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub cohort: String,
    pub eligible: String,
    /// Cohort tokens meaning "never treated".
    pub never_tokens: Vec<String>,
    pub delimiter: char,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            unit: "unit".into(),
            time: "time".into(),
            outcome: "outcome".into(),
            cohort: "cohort".into(),
            eligible: "eligible".into(),
            never_tokens: vec![String::new(), "never".into()],
            delimiter: ',',
        }
    }
}

impl Schema {
    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .map_err(|_| Error::Schema(format!("delimiter {:?} is not ASCII", self.delimiter)))
    }
}

fn parse_eligible(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

struct RawUnit {
    cohort: CohortLabel,
    eligible: bool,
    outcomes: BTreeMap<i64, f64>,
    seen: std::collections::BTreeSet<i64>,
}

/// Read a panel from delimiter-separated text with a header row.
pub fn load_panel<R: Read>(source: R, schema: &Schema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let (c_unit, c_time, c_out, c_coh, c_elig) = (
        col(&schema.unit)?,
        col(&schema.time)?,
        col(&schema.outcome)?,
        col(&schema.cohort)?,
        col(&schema.eligible)?,
    );

    let mut order: Vec<String> = Vec::new();
    let mut raw: HashMap<String, RawUnit> = HashMap::new();
    let mut t_lo = i64::MAX;
    let mut t_hi = i64::MIN;

    for (k, rec) in rdr.records().enumerate() {
        // Header is row 1.
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str> {
            rec.get(c).ok_or_else(|| Error::Parse {
                row,
                message: format!("expected at least {} fields", c + 1),
            })
        };
        let unit = field(c_unit)?.to_string();
        if unit.is_empty() {
            return Err(Error::Parse {
                row,
                message: "empty unit id".into(),
            });
        }
        let time: i64 = field(c_time)?.parse().map_err(|_| Error::Parse {
            row,
            message: format!("invalid time {:?}", field(c_time).unwrap_or("")),
        })?;
        let out_raw = field(c_out)?;
        let outcome = if out_raw.is_empty() || out_raw.eq_ignore_ascii_case("na") {
            None
        } else {
            Some(out_raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("invalid outcome {out_raw:?}"),
            })?)
        };
        let coh_raw = field(c_coh)?;
        let cohort = if schema.never_tokens.iter().any(|t| t == coh_raw) {
            CohortLabel::Never
        } else {
            CohortLabel::Finite(coh_raw.parse().map_err(|_| Error::Parse {
                row,
                message: format!("invalid cohort {coh_raw:?}"),
            })?)
        };
        let elig_raw = field(c_elig)?;
        let eligible = parse_eligible(elig_raw).ok_or_else(|| {
            Error::Schema(format!(
                "row {row}: eligible value {elig_raw:?} not in {{0,1,true,false}}"
            ))
        })?;

        t_lo = t_lo.min(time);
        t_hi = t_hi.max(time);

        let entry = raw.entry(unit.clone()).or_insert_with(|| {
            order.push(unit.clone());
            RawUnit {
                cohort,
                eligible,
                outcomes: BTreeMap::new(),
                seen: Default::default(),
            }
        });
        if entry.eligible != eligible {
            return Err(Error::Schema(format!(
                "row {row}: eligibility of unit {unit} varies over time"
            )));
        }
        if entry.cohort != cohort {
            return Err(Error::Schema(format!(
                "row {row}: cohort of unit {unit} varies over time"
            )));
        }
        if !entry.seen.insert(time) {
            return Err(Error::Duplicate { unit, time });
        }
        if let Some(y) = outcome {
            entry.outcomes.insert(time, y);
        }
    }

    if order.is_empty() {
        return Err(Error::EmptyInput("panel has no rows".into()));
    }

    let origin = t_lo;
    let remap = |t: i64| t - origin + 1;
    let big_t = remap(t_hi);
    let mut units = Vec::with_capacity(order.len());
    for id in order {
        let r = raw.remove(&id).expect("unit registered in order");
        let cohort = match r.cohort {
            CohortLabel::Finite(g) => {
                let p = remap(g);
                if p < 1 || p > big_t {
                    return Err(Error::Schema(format!(
                        "unit {id}: cohort {g} outside observed time range [{t_lo}, {t_hi}]"
                    )));
                }
                CohortLabel::Finite(p)
            }
            CohortLabel::Never => CohortLabel::Never,
        };
        units.push(UnitRecord {
            id,
            cohort,
            eligible: r.eligible,
            outcomes: r.outcomes.into_iter().map(|(t, y)| (remap(t), y)).collect(),
        });
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("time_origin".to_string(), origin.to_string());
    PanelDataset::new(units, (1, big_t), metadata)
}

pub fn load_panel_path(path: impl AsRef<Path>, schema: &Schema) -> Result<PanelDataset> {
    let f = std::fs::File::open(path)?;
    load_panel(std::io::BufReader::new(f), schema)
}

/// Write a panel in the layout accepted by [`load_panel`], using calendar
/// periods. Placeholder rows with an empty outcome keep the time range and
/// units without observations intact on reload.
pub fn write_panel<W: Write>(ds: &PanelDataset, sink: W, schema: &Schema) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .from_writer(sink);
    w.write_record([
        &schema.unit,
        &schema.time,
        &schema.outcome,
        &schema.cohort,
        &schema.eligible,
    ])?;
    let never = schema
        .never_tokens
        .iter()
        .find(|t| !t.is_empty())
        .or_else(|| schema.never_tokens.first())
        .cloned()
        .unwrap_or_else(|| "never".into());
    let (t_min, t_max) = ds.time_range();
    let observed = |t: i64| ds.units().iter().any(|u| u.outcomes.contains_key(&t));
    let mut pad: Vec<i64> = Vec::new();
    if !observed(t_min) {
        pad.push(t_min);
    }
    if !observed(t_max) && t_max != t_min {
        pad.push(t_max);
    }
    for (k, u) in ds.units().iter().enumerate() {
        let cohort = match u.cohort {
            CohortLabel::Finite(g) => ds.calendar_time(g).to_string(),
            CohortLabel::Never => never.clone(),
        };
        let elig = if u.eligible { "1" } else { "0" };
        let mut rows: Vec<(i64, Option<f64>)> =
            u.outcomes.iter().map(|(&t, &y)| (t, Some(y))).collect();
        if k == 0 {
            rows.extend(pad.iter().map(|&t| (t, None)));
        } else if u.outcomes.is_empty() {
            rows.push((t_min, None));
        }
        rows.sort_by_key(|r| r.0);
        rows.dedup_by_key(|r| r.0);
        for (t, y) in rows {
            let y = y.map(|v| format!("{v:?}")).unwrap_or_default();
            w.write_record([
                u.id.as_str(),
                &ds.calendar_time(t).to_string(),
                &y,
                &cohort,
                elig,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One (cohort, eligibility) cell and its size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCount {
    pub cohort: CohortLabel,
    pub eligible: bool,
    pub count: usize,
}

/// Structured validation finding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyCell { cohort: CohortLabel, eligible: bool },
    CohortBeforeFirstPeriod { cohort: i64 },
    UnitWithoutObservations { unit: String },
    NoTreatedCohort,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyCell { cohort, eligible } => {
                write!(f, "empty cell ({cohort},{})", u8::from(*eligible))
            }
            Violation::CohortBeforeFirstPeriod { cohort } => {
                write!(f, "cohort {cohort} before first differencing period")
            }
            Violation::UnitWithoutObservations { unit } => {
                write!(f, "unit {unit} has no observed outcomes")
            }
            Violation::NoTreatedCohort => f.write_str("no treated cohort"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub cell_counts: Vec<CellCount>,
    pub violations: Vec<Violation>,
    pub overlap_ok: bool,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.overlap_ok && self.violations.is_empty()
    }
}

/// Check the group-by-eligibility partition and cohort labels. Every
/// cohort present needs both an eligible and an ineligible cell.
pub fn validate_panel(ds: &PanelDataset) -> ValidationReport {
    let mut counts: BTreeMap<(CohortLabel, bool), usize> = BTreeMap::new();
    for u in ds.units() {
        *counts.entry((u.cohort, u.eligible)).or_default() += 1;
    }
    let mut violations = Vec::new();
    let mut overlap_ok = true;
    let cohorts = ds.cohorts();
    for &c in &cohorts {
        for q in [true, false] {
            if !counts.contains_key(&(c, q)) {
                overlap_ok = false;
                violations.push(Violation::EmptyCell {
                    cohort: c,
                    eligible: q,
                });
            }
        }
    }
    let (t_min, _) = ds.time_range();
    for &c in &cohorts {
        if let CohortLabel::Finite(g) = c {
            if g <= t_min {
                violations.push(Violation::CohortBeforeFirstPeriod { cohort: g });
            }
        }
    }
    if !cohorts.iter().any(|c| c.finite().is_some()) {
        violations.push(Violation::NoTreatedCohort);
    }
    for u in ds.units() {
        if u.outcomes.is_empty() {
            violations.push(Violation::UnitWithoutObservations { unit: u.id.clone() });
        }
    }
    // Report every cell of the full partition, including empty ones.
    let mut cell_counts = Vec::new();
    for &c in &cohorts {
        for q in [true, false] {
            cell_counts.push(CellCount {
                cohort: c,
                eligible: q,
                count: counts.get(&(c, q)).copied().unwrap_or(0),
            });
        }
    }
    ValidationReport {
        cell_counts,
        violations,
        overlap_ok,
    }
}

/// `Y_{unit,t} - Y_{unit,baseline}`, or `None` when either period is missing.
pub fn long_difference(ds: &PanelDataset, unit: &str, t: i64, baseline: i64) -> Result<Option<f64>> {
    let idx = ds.unit_index(unit)?;
    Ok(ds.unit(idx).long_difference(t, baseline))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellMean {
    pub mean: f64,
    /// Members actually averaged.
    pub count: usize,
    /// Members lacking `t` or the baseline.
    pub dropped: usize,
}

/// Mean long difference over `members`, skipping units without both periods.
pub fn cell_mean(ds: &PanelDataset, members: &[UnitIdx], t: i64, baseline: i64) -> Result<CellMean> {
    if members.is_empty() {
        return Err(Error::EmptyInput("cell has no members".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for &i in members {
        if let Some(d) = ds.unit(i).long_difference(t, baseline) {
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput(format!(
            "no member observed at both t={t} and baseline={baseline}"
        )));
    }
    Ok(CellMean {
        mean: sum / count as f64,
        count,
        dropped: members.len() - count,
    })
}
